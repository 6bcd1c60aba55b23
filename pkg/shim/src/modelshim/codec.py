"""Base64 payload codecs for the wire protocol.

Latents travel as base64-wrapped NPY buffers (float32, 4-D, laid out
channels x frames x height x width); rendered frames as base64 PNGs.
"""

import base64
import binascii
import io

import numpy as np
from PIL import Image


class CodecError(ValueError):
    """A payload that cannot be decoded into the expected form."""


def encode_array_b64(array: np.ndarray) -> str:
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_latent_b64(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise CodecError(f"payload is not valid base64: {exc}") from exc
    try:
        array = np.load(io.BytesIO(raw), allow_pickle=False)
    except Exception as exc:  # numpy raises several types for bad buffers
        raise CodecError(f"payload is not a valid NPY buffer: {exc}") from exc
    if array.dtype != np.float32:
        raise CodecError(f"latent must be float32, got {array.dtype}")
    if array.ndim != 4:
        raise CodecError(f"latent must be 4-D, got {array.ndim}-D")
    return array


def encode_frame_png_b64(frame: np.ndarray) -> str:
    if frame.dtype != np.uint8 or frame.ndim != 2:
        raise CodecError(f"frame must be 2-D uint8, got {frame.dtype} {frame.ndim}-D")
    buffer = io.BytesIO()
    Image.fromarray(frame, mode="L").save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_b64(payload: str) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise CodecError(f"payload is not valid base64: {exc}") from exc
