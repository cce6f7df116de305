"""Toy encoder-decoder segmentation network with a pluggable attention slot.

The network is deliberately tiny: a 1x1 channel map from RGB, one 3x3
convolution stage, an optional channel-attention block, and a 1x1 per-pixel
classifier head. It exists to exercise the attention blocks inside a full
gradient pipeline at desk scale, not to approach the accuracy of any
full-scale segmentation system. Validation converts per-pixel argmax output
into instances via 4-connected components (fewer than 8 pixels discarded)
and scores them with the segmentation metrics module.

Training is bit-deterministic given a config: seeded initialization,
seeded shuffling and a fixed iteration order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np
from scipy import ndimage

from . import attention, ops
from .attention import AttentionConfig, MVAdapterParams, write_checkpoint
from .metrics import BinaryMask, Instance, evaluate
from .synthetic import load_dataset
from .tensor import Tensor

__all__ = [
    "conv3x3",
    "conv1x1",
    "softmax_ce_loss",
    "SgdState",
    "sgd_step",
    "ToySegNet",
    "class_probabilities",
    "extract_instances",
    "rasterize_labels",
    "TrainConfig",
    "load_config",
    "TrainResult",
    "train",
]

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


# ---------------------------------------------------------------------------
# network ops


def conv3x3(x: ops.Value, weight: ops.Value, bias: ops.Value) -> ops.Value:
    """3x3 cross-correlation, stride 1, zero padding 1.

    Shapes: [B,Cin,H,W] x [Cout,Cin,3,3] x [Cout] -> [B,Cout,H,W].
    """
    xv, wv, bv = ops._raw(x), ops._raw(weight), ops._raw(bias)
    if xv.ndim != 4:
        raise ValueError(f"conv3x3: expected input [B,Cin,H,W], got shape {xv.shape}")
    if wv.ndim != 4 or wv.shape[2:] != (3, 3):
        raise ValueError(f"conv3x3: expected weight [Cout,Cin,3,3], got shape {wv.shape}")
    if wv.shape[1] != xv.shape[1]:
        raise ValueError(
            f"conv3x3: weight expects {wv.shape[1]} input channels, input has {xv.shape[1]}"
        )
    if bv.shape != (wv.shape[0],):
        raise ValueError(f"conv3x3: bias shape {bv.shape} does not match {wv.shape[0]} outputs")

    def _windows(a):
        padded = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
        return np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))

    def fwd(xv, wv, bv):
        out = np.einsum("bchwij,ocij->bohw", _windows(xv), wv, optimize=True)
        return out + bv[None, :, None, None]

    def bwd(g, ins, out):
        xv, wv, _ = ins
        gw = np.einsum("bohw,bchwij->ocij", g, _windows(xv), optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        flipped = wv[:, :, ::-1, ::-1]
        gx = np.einsum("bohwij,ocij->bchw", _windows(g), flipped, optimize=True)
        return (gx, gw, gb)

    return ops.custom_op("conv3x3", fwd, bwd, x, weight, bias)


def conv1x1(x: ops.Value, weight: ops.Value, bias: ops.Value) -> ops.Value:
    """Per-pixel channel map: [B,Cin,H,W] x [Cout,Cin] x [Cout] -> [B,Cout,H,W]."""
    xv, wv, bv = ops._raw(x), ops._raw(weight), ops._raw(bias)
    if xv.ndim != 4:
        raise ValueError(f"conv1x1: expected input [B,Cin,H,W], got shape {xv.shape}")
    if wv.ndim != 2 or wv.shape[1] != xv.shape[1]:
        raise ValueError(f"conv1x1: weight {wv.shape} incompatible with input {xv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ValueError(f"conv1x1: bias shape {bv.shape} does not match {wv.shape[0]} outputs")

    def fwd(xv, wv, bv):
        return np.einsum("oc,bchw->bohw", wv, xv, optimize=True) + bv[None, :, None, None]

    def bwd(g, ins, out):
        xv, wv, _ = ins
        gx = np.einsum("oc,bohw->bchw", wv, g, optimize=True)
        gw = np.einsum("bohw,bchw->oc", g, xv, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return ops.custom_op("conv1x1", fwd, bwd, x, weight, bias)


def softmax_ce_loss(logits: ops.Value, labels: np.ndarray) -> ops.Value:
    """Mean per-pixel cross entropy against integer labels.

    ``logits`` is [B,K,H,W]; ``labels`` holds category ids in [0, K) with
    shape [B,H,W]. Stabilized by max subtraction, which cancels exactly in
    the log-softmax, so the loss stays smooth in the logits.
    """
    lv = ops._raw(logits)
    labels = np.asarray(labels)
    if lv.ndim != 4:
        raise ValueError(f"softmax_ce_loss: expected logits [B,K,H,W], got shape {lv.shape}")
    b, k, h, w = lv.shape
    if labels.shape != (b, h, w):
        raise ValueError(
            f"softmax_ce_loss: labels shape {labels.shape} does not match logits {lv.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"softmax_ce_loss: labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"softmax_ce_loss: labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    picker = labels[:, None, :, :]

    def _log_softmax(z):
        shifted = z - z.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def fwd(z):
        picked = np.take_along_axis(_log_softmax(z), picker, axis=1)
        return np.asarray(-picked.mean())

    def bwd(g, ins, out):
        z = ins[0]
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        np.put_along_axis(probs, picker, np.take_along_axis(probs, picker, axis=1) - 1.0, axis=1)
        return (probs * (g / (b * h * w)),)

    return ops.custom_op("softmax_ce_loss", fwd, bwd, logits)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class SgdState:
    """Momentum-SGD state; velocities mirror the parameter shapes."""

    lr: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: SgdState,
) -> tuple[dict[str, np.ndarray], SgdState]:
    """One update ``v <- momentum*v + g; p <- p - lr*v`` per parameter.

    Inputs are not mutated; fresh parameter and state dicts are returned.
    """
    new_params: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = state.momentum * state.velocity.get(name, np.zeros_like(p)) + g
        new_velocity[name] = v
        new_params[name] = p - state.lr * v
    return new_params, replace(state, velocity=new_velocity)


# ---------------------------------------------------------------------------
# the network


@dataclass(frozen=True)
class ToySegNet:
    """RGB -> per-pixel class logits with a configurable attention slot.

    Output shape is always [B, categories+1, H, W] (class 0 is background),
    and switching the slot never changes any other parameter count.
    """

    channels: int = 8
    categories: int = 3
    slot: str = "none"
    reduction: int = 4
    kernel: int = 3

    def __post_init__(self):
        if self.slot not in attention.BLOCK_KINDS:
            raise ValueError(
                f"unknown slot {self.slot!r}; expected one of {attention.BLOCK_KINDS}"
            )
        # Validates channel/reduction/kernel compatibility up front.
        self.attention_config()

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(channels=self.channels, reduction=self.reduction, kernel=self.kernel)

    def init(self, seed: int) -> dict[str, np.ndarray]:
        """Glorot-uniform stem/head weights, zero biases, seeded attention."""
        rng = np.random.default_rng(seed)
        c, k_out = self.channels, self.categories + 1

        def glorot(shape, fan_in, fan_out):
            s = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-s, s, shape)

        params = {
            "stem_pw/w": glorot((c, 3), 3, c),
            "stem_pw/b": np.zeros(c),
            "stem_conv/w": glorot((c, c, 3, 3), 9 * c, 9 * c),
            "stem_conv/b": np.zeros(c),
            "head/w": glorot((k_out, c), c, k_out),
            "head/b": np.zeros(k_out),
        }
        if self.slot != "none":
            cfg = AttentionConfig(
                channels=c, reduction=self.reduction, kernel=self.kernel, init_seed=seed
            )
            block = attention.init_params(cfg)
            if self.slot == "eca":
                params["attn/k1d"] = np.asarray(block.k1d.array)
            else:
                params["attn/w1"] = np.asarray(block.w1.array)
                params["attn/b1"] = np.asarray(block.b1.array)
                params["attn/w2"] = np.asarray(block.w2.array)
                params["attn/b2"] = np.asarray(block.b2.array)
                if self.slot == "mv_adapter":
                    params["attn/k1d"] = np.asarray(block.k1d.array)
        return params

    def _apply_slot(self, params: Mapping[str, ops.Value], h: ops.Value) -> ops.Value:
        if self.slot == "none":
            return h
        if self.slot == "eca":
            return attention.eca_forward(params["attn/k1d"], h).x_out
        block = MVAdapterParams(
            w1=params["attn/w1"],
            b1=params["attn/b1"],
            w2=params["attn/w2"],
            b2=params["attn/b2"],
            k1d=params.get("attn/k1d", attention.identity_kernel(self.kernel)),
            reduction=self.reduction,
            kernel=self.kernel,
        )
        forward = {
            "mv_adapter": attention.mv_adapter_forward,
            "color_attention": attention.color_attention_forward,
            "se": attention.se_forward,
        }[self.slot]
        return forward(block, h).x_out

    def forward(self, params: Mapping[str, ops.Value], x: ops.Value) -> ops.Value:
        h = ops.relu(conv1x1(x, params["stem_pw/w"], params["stem_pw/b"]))
        h = ops.relu(conv3x3(h, params["stem_conv/w"], params["stem_conv/b"]))
        h = self._apply_slot(params, h)
        return conv1x1(h, params["head/w"], params["head/b"])


# ---------------------------------------------------------------------------
# prediction -> instances


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the class axis of [K,H,W] logits."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def extract_instances(probs: np.ndarray, min_pixels: int = 8) -> list[Instance]:
    """Split an argmax map into 4-connected components per category.

    Components smaller than ``min_pixels`` are dropped; each instance is
    scored with the mean predicted probability of its category over its
    pixels.
    """
    predicted = probs.argmax(axis=0)
    instances: list[Instance] = []
    for category in range(1, probs.shape[0]):
        labeled, n_components = ndimage.label(predicted == category, structure=_FOUR_CONN)
        for component in range(1, n_components + 1):
            mask = labeled == component
            if int(mask.sum()) < min_pixels:
                continue
            score = float(probs[category][mask].mean())
            instances.append(Instance(mask=BinaryMask(mask), category=category, score=score))
    return instances


def rasterize_labels(instances: list[Instance], height: int, width: int) -> np.ndarray:
    """Per-pixel category map (0 = background) from disjoint visible masks."""
    labels = np.zeros((height, width), dtype=np.int64)
    for inst in instances:
        labels[inst.mask.bits] = inst.category
    return labels


# ---------------------------------------------------------------------------
# the training loop


_BATCH_SIZE = 4


@dataclass(frozen=True)
class TrainConfig:
    slot: str = "none"
    seed: int = 0
    epochs: int = 8
    lr: float = 0.1
    momentum: float = 0.9
    channels: int = 8
    reduction: int = 4
    kernel: int = 3
    dataset: str = ""
    out_dir: str = ""


def load_config(path) -> TrainConfig:
    """Parse a flat ``key=value`` config file (blank lines and # comments ok)."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {line_number}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in types:
                raise ValueError(f"line {line_number}: unknown config key {key!r}")
            if types[key] == "int":
                values[key] = int(raw)
            elif types[key] == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
    return TrainConfig(**values)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    checkpoint_path: str
    history_path: str


def _predict_instances(net: ToySegNet, params: Mapping[str, np.ndarray], image: np.ndarray):
    tensor_params = {name: Tensor(value) for name, value in params.items()}
    logits = net.forward(tensor_params, Tensor(image[None]))
    return extract_instances(class_probabilities(logits.array[0]))


def train(cfg: TrainConfig) -> TrainResult:
    """Train the toy net on a generated dataset; deterministic given cfg.

    The last quarter of the dataset (in manifest order) is held out for
    validation. Per-epoch records carry the mean training loss and the
    validation mAP/AP50/AP75; they are written to ``out_dir/history.jsonl``
    and the final parameters to ``out_dir/checkpoint.mvck``.
    """
    if cfg.slot not in attention.BLOCK_KINDS:
        raise ValueError(f"unknown slot {cfg.slot!r}; expected one of {attention.BLOCK_KINDS}")
    if not os.path.isdir(cfg.dataset):
        raise FileNotFoundError(f"dataset directory not found: {cfg.dataset!r}")
    manifest, _, images, gts = load_dataset(cfg.dataset)

    net = ToySegNet(
        channels=cfg.channels,
        categories=manifest["categories"],
        slot=cfg.slot,
        reduction=cfg.reduction,
        kernel=cfg.kernel,
    )
    x_all = [img.astype("f64").array for img in images]
    y_all = [
        rasterize_labels(inst, manifest["height"], manifest["width"]) for inst in gts
    ]
    n_val = max(1, len(x_all) // 4)
    train_idx = list(range(len(x_all) - n_val))
    val_idx = list(range(len(x_all) - n_val, len(x_all)))
    if not train_idx:
        raise ValueError("dataset too small to split: need at least 2 images")

    params = net.init(cfg.seed)
    state = SgdState(lr=cfg.lr, momentum=cfg.momentum)
    shuffle_rng = np.random.default_rng((cfg.seed, 0x5EED))
    history: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        order = [train_idx[i] for i in shuffle_rng.permutation(len(train_idx))]
        losses: list[float] = []
        for start in range(0, len(order), _BATCH_SIZE):
            batch = order[start : start + _BATCH_SIZE]
            xb = np.stack([x_all[i] for i in batch])
            yb = np.stack([y_all[i] for i in batch])
            leaves = {name: ops.Node.leaf(Tensor(value)) for name, value in params.items()}
            loss = softmax_ce_loss(net.forward(leaves, Tensor(xb)), yb)
            ops.backward(loss)
            grads = {
                name: (leaf._grad if leaf._grad is not None else np.zeros_like(params[name]))
                for name, leaf in leaves.items()
            }
            params, state = sgd_step(params, grads, state)
            losses.append(loss.value.item())

        preds = [_predict_instances(net, params, x_all[i]) for i in val_idx]
        report = evaluate(preds, [gts[i] for i in val_idx])
        history.append(
            {
                "epoch": epoch,
                "loss": math.fsum(losses) / len(losses),
                "map": report.map,
                "ap50": report.ap50,
                "ap75": report.ap75,
            }
        )

    os.makedirs(cfg.out_dir, exist_ok=True)
    checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.mvck")
    history_path = os.path.join(cfg.out_dir, "history.jsonl")
    write_checkpoint(checkpoint_path, {name: Tensor(value) for name, value in params.items()})
    with open(history_path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    return TrainResult(
        params=params, history=history, checkpoint_path=checkpoint_path, history_path=history_path
    )
