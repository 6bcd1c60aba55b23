"""Latent video tensors and their on-disk format.

A latent video is a dense float32 array with axes (channels, frames,
height, width).  Everything downstream (noise projection, flow
integration, the generator wire format) moves these around, so the
container enforces the invariants once: rank 4, every dim >= 1, all
values finite, immutable after construction.

Files use the NPY version 1.0 layout with a fixed header contract:
little-endian float32 (``'<f4'``), C order, 4-D shape.  The reader
rejects anything else with a distinct error per failure mode so callers
can tell a corrupt header from a wrong dtype from a short payload.
"""

from __future__ import annotations

import ast
import io
import struct
from dataclasses import dataclass

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
NPY_VERSION = (1, 0)
_HEADER_ALIGN = 64


class TensorIOError(Exception):
    """Base class for latent tensor file errors."""


class MalformedHeaderError(TensorIOError):
    """Magic, version, or header dict could not be parsed or violates the layout contract."""


class DtypeMismatchError(TensorIOError):
    """File declares an element type other than little-endian float32."""


class ShapeRankError(TensorIOError):
    """File declares a shape that is not rank 4 or has a non-positive dim."""


class TruncatedPayloadError(TensorIOError):
    """Payload byte count does not match the declared shape."""


@dataclass(frozen=True)
class TensorShape:
    """Geometry of a latent video: channels, frames, height, width."""

    c: int
    f: int
    h: int
    w: int

    def __post_init__(self) -> None:
        for name, value in (("c", self.c), ("f", self.f), ("h", self.h), ("w", self.w)):
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"tensor dim {name} must be a positive int, got {value!r}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.c, self.f, self.h, self.w)

    @property
    def size(self) -> int:
        return self.c * self.f * self.h * self.w


class LatentTensor:
    """Immutable 4-D float32 array with validated geometry.

    Accepts any array-like; data is copied, cast to float32, and frozen.
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray) -> None:
        arr = np.array(data, dtype=np.float32, copy=True, order="C")
        if arr.ndim != 4:
            raise ValueError(f"latent tensor must be 4-D (C,F,H,W), got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"latent tensor dims must all be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("latent tensor must be finite (no NaN or Inf)")
        arr.flags.writeable = False
        object.__setattr__(self, "_data", arr)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("LatentTensor is immutable")

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 view of the underlying array."""
        return self._data

    @property
    def shape(self) -> TensorShape:
        c, f, h, w = self._data.shape
        return TensorShape(c, f, h, w)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LatentTensor):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __repr__(self) -> str:
        c, f, h, w = self._data.shape
        return f"LatentTensor(c={c}, f={f}, h={h}, w={w})"


def gaussian_noise(shape: TensorShape, seed: int) -> LatentTensor:
    """Draw i.i.d. standard normal noise, deterministic per (seed, shape)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    rng = np.random.default_rng(seed)
    return LatentTensor(rng.standard_normal(shape.as_tuple(), dtype=np.float32))


def tensor_stats(tensor: LatentTensor) -> dict[str, float]:
    """Mean, population variance, and Frobenius norm as plain floats."""
    data = tensor.data.astype(np.float64)
    return {
        "mean": float(data.mean()),
        "variance": float(data.var()),
        "frobenius": float(np.sqrt(np.sum(data * data))),
    }


def tensor_to_npy_bytes(tensor: LatentTensor) -> bytes:
    """Serialize to NPY v1.0 bytes: '<f4', C order, 4-D shape."""
    arr = tensor.data
    header_dict = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % (
        str(tuple(int(d) for d in arr.shape)),
    )
    base = len(NPY_MAGIC) + 2 + 2  # magic + version + header-length field
    pad = _HEADER_ALIGN - ((base + len(header_dict) + 1) % _HEADER_ALIGN)
    pad %= _HEADER_ALIGN
    header = header_dict + " " * pad + "\n"
    out = io.BytesIO()
    out.write(NPY_MAGIC)
    out.write(bytes(NPY_VERSION))
    out.write(struct.pack("<H", len(header)))
    out.write(header.encode("latin1"))
    out.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return out.getvalue()


def tensor_from_npy_bytes(raw: bytes) -> LatentTensor:
    """Parse NPY v1.0 bytes back into a tensor, enforcing the header contract."""
    if len(raw) < len(NPY_MAGIC) + 4 or raw[: len(NPY_MAGIC)] != NPY_MAGIC:
        raise MalformedHeaderError("missing NPY magic string")
    major, minor = raw[6], raw[7]
    if (major, minor) != NPY_VERSION:
        raise MalformedHeaderError(f"unsupported NPY version {major}.{minor}, need 1.0")
    (header_len,) = struct.unpack("<H", raw[8:10])
    header_end = 10 + header_len
    if len(raw) < header_end:
        raise MalformedHeaderError("header length exceeds file size")
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeaderError(f"header is not a parseable dict: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeaderError(f"unexpected header keys: {header!r}")

    if header["descr"] != "<f4":
        raise DtypeMismatchError(f"element type must be '<f4', file declares {header['descr']!r}")
    if header["fortran_order"] is not False:
        raise MalformedHeaderError("fortran_order must be False (C layout required)")

    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or len(shape) != 4
        or any(not isinstance(d, int) or d < 1 for d in shape)
    ):
        raise ShapeRankError(f"shape must be 4 positive dims, file declares {shape!r}")

    expected = 4 * int(np.prod(shape))
    payload = raw[header_end:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, shape {shape} requires {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return LatentTensor(arr)


def save_tensor(tensor: LatentTensor, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_npy_bytes(tensor))


def load_tensor(path: str) -> LatentTensor:
    with open(path, "rb") as fh:
        return tensor_from_npy_bytes(fh.read())
