"""Adaptive channel-attention blocks.

The main block squeezes each channel to two global descriptors (mean and
max), pushes both through a shared bottleneck MLP, sums the branches, mixes
neighbouring channels with a short 1-D convolution, and finally gates the
input channels with a sigmoid. Three reduced variants are provided for
ablations: the same block without the 1-D stage, a squeeze-excite block
(average branch only), and a kernel-only block (no MLP).

All forwards accept tensors or graph nodes, return the rescaled features
together with the gate, and preserve the input shape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import ops
from .tensor import FormatError, Tensor, mvtn_from_bytes, mvtn_to_bytes

__all__ = [
    "BLOCK_KINDS",
    "AttentionConfig",
    "MVAdapterParams",
    "AttentionResult",
    "init_params",
    "mv_adapter_forward",
    "color_attention_forward",
    "se_forward",
    "eca_forward",
    "param_count",
    "write_checkpoint",
    "read_checkpoint",
]

BLOCK_KINDS = ("none", "mv_adapter", "color_attention", "se", "eca")


@dataclass(frozen=True)
class AttentionConfig:
    """Hyper-parameters of one attention block."""

    channels: int
    reduction: int = 4
    kernel: int = 3
    share_mlp: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {self.reduction}")
        if self.channels % self.reduction != 0:
            raise ValueError(
                f"reduction {self.reduction} does not divide channels {self.channels}"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel width must be odd and >= 1, got {self.kernel}")


@dataclass
class MVAdapterParams:
    """Learnable state of one block.

    ``w1/b1`` squeeze C channels down to C/r, ``w2/b2`` excite them back,
    and ``k1d`` is the 1-D cross-channel kernel. When the two pooling
    branches do not share the MLP, the max branch carries its own set in
    ``w1m/b1m/w2m/b2m`` (otherwise these stay ``None``).
    """

    w1: ops.Value
    b1: ops.Value
    w2: ops.Value
    b2: ops.Value
    k1d: ops.Value
    reduction: int
    kernel: int
    w1m: ops.Value | None = None
    b1m: ops.Value | None = None
    w2m: ops.Value | None = None
    b2m: ops.Value | None = None

    @property
    def channels(self) -> int:
        w = self.w1.value if isinstance(self.w1, ops.Node) else self.w1
        return w.shape[1]

    @property
    def share_mlp(self) -> bool:
        return self.w1m is None


class AttentionResult(NamedTuple):
    x_out: ops.Value
    gate: ops.Value


def identity_kernel(width: int, dtype: str = "f64") -> Tensor:
    """Kernel [0,...,0,1,0,...,0] that makes the 1-D stage a no-op."""
    k = np.zeros(width)
    k[width // 2] = 1.0
    return Tensor(k, dtype=dtype)


def init_params(cfg: AttentionConfig, dtype: str = "f64") -> MVAdapterParams:
    """Deterministic initialization for one block.

    MLP weights are uniform Glorot draws, biases start at zero and the 1-D
    kernel starts as the identity, so a freshly initialized block reduces
    to the variant without the cross-channel stage.
    """
    c = cfg.channels
    cr = c // cfg.reduction
    rng = np.random.default_rng(cfg.init_seed)
    scale = np.sqrt(6.0 / (c + cr))

    def draw(shape):
        return Tensor(rng.uniform(-scale, scale, shape), dtype=dtype)

    w1, w2 = draw((cr, c)), draw((c, cr))
    params = MVAdapterParams(
        w1=w1,
        b1=Tensor.zeros((cr,), dtype),
        w2=w2,
        b2=Tensor.zeros((c,), dtype),
        k1d=identity_kernel(cfg.kernel, dtype),
        reduction=cfg.reduction,
        kernel=cfg.kernel,
    )
    if not cfg.share_mlp:
        params.w1m = draw((cr, c))
        params.b1m = Tensor.zeros((cr,), dtype)
        params.w2m = draw((c, cr))
        params.b2m = Tensor.zeros((c,), dtype)
    return params


def _check_channels(params: MVAdapterParams, x: ops.Value, op: str) -> None:
    xv = x.value if isinstance(x, ops.Node) else x
    if xv.rank != 4:
        raise ValueError(f"{op}: expected input [B,C,H,W], got shape {xv.shape}")
    if xv.shape[1] != params.channels:
        raise ValueError(
            f"{op}: block built for {params.channels} channels, input has {xv.shape[1]}"
        )


def _mlp(pooled, w1, b1, w2, b2):
    return ops.pointwise_conv(ops.relu(ops.pointwise_conv(pooled, w1, b1)), w2, b2)


def _dual_branch_preact(params: MVAdapterParams, x: ops.Value):
    avg_out = _mlp(ops.global_avg_pool(x), params.w1, params.b1, params.w2, params.b2)
    if params.share_mlp:
        max_out = _mlp(ops.global_max_pool(x), params.w1, params.b1, params.w2, params.b2)
    else:
        max_out = _mlp(ops.global_max_pool(x), params.w1m, params.b1m, params.w2m, params.b2m)
    return ops.elementwise_add(avg_out, max_out)


def mv_adapter_forward(params: MVAdapterParams, x: ops.Value) -> AttentionResult:
    """Full block: dual pooling, MLP fusion, 1-D channel mix, sigmoid gate."""
    _check_channels(params, x, "mv_adapter_forward")
    fused = _dual_branch_preact(params, x)
    mixed = ops.conv1d_channel(ops.reshape_channel_vector(fused), params.k1d)
    gate = ops.sigmoid(ops.restore_channel_map(mixed))
    return AttentionResult(ops.broadcast_mul_channels(gate, x), gate)


def color_attention_forward(params: MVAdapterParams, x: ops.Value) -> AttentionResult:
    """Dual-pooling baseline: same chain minus the 1-D channel stage."""
    _check_channels(params, x, "color_attention_forward")
    gate = ops.sigmoid(_dual_branch_preact(params, x))
    return AttentionResult(ops.broadcast_mul_channels(gate, x), gate)


def se_forward(params: MVAdapterParams, x: ops.Value) -> AttentionResult:
    """Squeeze-excite baseline: average pooling branch only."""
    _check_channels(params, x, "se_forward")
    pre = _mlp(ops.global_avg_pool(x), params.w1, params.b1, params.w2, params.b2)
    gate = ops.sigmoid(pre)
    return AttentionResult(ops.broadcast_mul_channels(gate, x), gate)


def eca_forward(k1d: ops.Value, x: ops.Value) -> AttentionResult:
    """Kernel-only baseline: 1-D channel mix of the pooled means, no MLP."""
    xv = x.value if isinstance(x, ops.Node) else x
    if xv.rank != 4:
        raise ValueError(f"eca_forward: expected input [B,C,H,W], got shape {xv.shape}")
    mixed = ops.conv1d_channel(ops.reshape_channel_vector(ops.global_avg_pool(x)), k1d)
    gate = ops.sigmoid(ops.restore_channel_map(mixed))
    return AttentionResult(ops.broadcast_mul_channels(gate, x), gate)


def param_count(kind: str, cfg: AttentionConfig) -> int:
    """Exact number of learnable scalars for one block kind."""
    if kind not in BLOCK_KINDS:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    c, r, k = cfg.channels, cfg.reduction, cfg.kernel
    mlp = 2 * (c * c // r) + c // r + c
    if kind == "none":
        return 0
    if kind == "se":
        return mlp
    if kind == "eca":
        return k
    branches = mlp if cfg.share_mlp else 2 * mlp
    if kind == "color_attention":
        return branches
    return branches + k  # mv_adapter


# ---------------------------------------------------------------------------
# MVCK checkpoint container

_CKPT_MAGIC = b"MVCK"
_CKPT_VERSION = 1


def write_checkpoint(path, tensors: Mapping[str, Tensor]) -> None:
    """Write named tensors as an MVCK file; round-trips bitwise."""
    chunks = [struct.pack("<4sHI", _CKPT_MAGIC, _CKPT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"checkpoint entry name too long: {name!r}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(mvtn_to_bytes(tensor))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 10:
        raise FormatError("truncated MVCK header")
    magic, version, count = struct.unpack_from("<4sHI", buf, 0)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported MVCK version {version}")
    pos = 10
    out: dict[str, Tensor] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated MVCK entry name length")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + name_len:
            raise FormatError("truncated MVCK entry name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tensor, pos = mvtn_from_bytes(buf, pos)
        out[name] = tensor
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} stray bytes after MVCK payload")
    return out
