"""Dense tensor values and the MVTN binary container.

:class:`Tensor` is the universal value of this package: an immutable,
row-major array of 32- or 64-bit floats. Graph construction and
differentiation live in :mod:`mvadapter.ops`; dataset and checkpoint files
embed the MVTN records produced here.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "FormatError",
    "mvtn_to_bytes",
    "mvtn_from_bytes",
    "write_mvtn",
    "read_mvtn",
]

_MAGIC = b"MVTN"
_VERSION = 1
_DTYPE_CODES = {"f32": 1, "f64": 2}
_CODE_DTYPES = {code: tag for tag, code in _DTYPE_CODES.items()}
_NP_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_TAG_OF_NP = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
# On-disk layouts are little-endian regardless of host byte order.
_LE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    """A binary container failed structural validation."""


class Tensor:
    """Immutable dense N-dimensional float array.

    Values are stored C-contiguous (row-major) and the backing buffer is
    marked read-only after construction, so tensors can be shared freely
    across threads and graphs. Rank-0 tensors hold a single scalar; every
    extent must be at least 1.
    """

    __slots__ = ("_array",)

    def __init__(self, data, dtype: str | None = None):
        if isinstance(data, Tensor):
            source = data._array
        else:
            source = np.asarray(data)
        if dtype is None:
            np_dtype = source.dtype if source.dtype in _TAG_OF_NP else _NP_DTYPES["f64"]
        else:
            if dtype not in _NP_DTYPES:
                raise ValueError(f"unsupported dtype tag {dtype!r}; expected 'f32' or 'f64'")
            np_dtype = _NP_DTYPES[dtype]
        array = np.array(source, dtype=np_dtype, order="C", copy=True)
        if array.size == 0:
            raise ValueError(f"zero-extent tensors are not supported: shape {array.shape}")
        array.setflags(write=False)
        self._array = array

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        # Internal fast path for freshly computed op outputs: takes ownership
        # instead of copying. Views of existing tensors are already read-only,
        # which keeps the shared buffer immutable either way.
        if array.dtype not in _TAG_OF_NP:
            raise TypeError(f"cannot wrap array of dtype {array.dtype}")
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        if array.size == 0:
            raise ValueError(f"zero-extent tensors are not supported: shape {array.shape}")
        if array.flags.writeable:
            array.setflags(write=False)
        out = cls.__new__(cls)
        out._array = array
        return out

    @classmethod
    def zeros(cls, shape, dtype: str = "f64") -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=_NP_DTYPES[dtype]))

    @classmethod
    def full(cls, shape, value: float, dtype: str = "f64") -> "Tensor":
        return cls._wrap(np.full(shape, value, dtype=_NP_DTYPES[dtype]))

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the values."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def dtype(self) -> str:
        """Precision tag, ``"f32"`` or ``"f64"``."""
        return _TAG_OF_NP[self._array.dtype]

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the buffer (read-only)."""
        return self._array.reshape(-1)

    def astype(self, dtype: str) -> "Tensor":
        if dtype == self.dtype:
            return self
        return Tensor(self._array, dtype=dtype)

    def item(self) -> float:
        if self._array.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self._array.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def mvtn_to_bytes(tensor: Tensor) -> bytes:
    """Serialize one tensor to an MVTN record."""
    code = _DTYPE_CODES[tensor.dtype]
    head = struct.pack("<4sHBB", _MAGIC, _VERSION, code, tensor.rank)
    dims = struct.pack(f"<{tensor.rank}Q", *tensor.shape)
    payload = np.ascontiguousarray(tensor.array, dtype=_LE_DTYPES[tensor.dtype]).tobytes()
    return head + dims + payload


def mvtn_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one MVTN record starting at ``offset``.

    Returns the tensor and the offset one past the record, so records can be
    embedded back to back inside larger containers.
    """
    need = offset + 8
    if len(buf) < need:
        raise FormatError("truncated MVTN header")
    magic, version, code, rank = struct.unpack_from("<4sHBB", buf, offset)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported MVTN version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    tag = _CODE_DTYPES[code]
    pos = offset + 8
    if len(buf) < pos + 8 * rank:
        raise FormatError("truncated MVTN extent list")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    if any(extent < 1 for extent in shape):
        raise FormatError(f"invalid extents {shape}")
    count = 1
    for extent in shape:
        count *= extent
    le_dtype = _LE_DTYPES[tag]
    nbytes = count * le_dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("truncated MVTN payload")
    flat = np.frombuffer(buf, dtype=le_dtype, count=count, offset=pos)
    array = flat.reshape(shape).astype(_NP_DTYPES[tag], copy=True)
    return Tensor._wrap(array), pos + nbytes


def write_mvtn(path, tensor: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(mvtn_to_bytes(tensor))


def read_mvtn(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    tensor, end = mvtn_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} stray bytes after MVTN payload")
    return tensor
