"""Backends the service can wrap.

Real model processes plug in behind the same two calls; the stubs here
produce fully conformant payloads without any model runtime, which is
what contract tests and local development need.
"""

from typing import Optional

import numpy as np

from .codec import encode_frame_png_b64
from .config import BackendChoice


class BackendUnavailableError(RuntimeError):
    """The wrapped model cannot serve the request right now."""


class StubGenerator:
    """Deterministic generator stand-in.

    With inline noise the latent is the noise itself, so callers can
    verify byte-level payload transport. With a seed the latent is a
    seeded standard-normal draw in the requested geometry.
    """

    def __init__(self, channels: int = 4, render_frames: bool = True) -> None:
        if channels < 1:
            raise ValueError(f"channels must be positive, got {channels}")
        self.channels = channels
        self.render_frames = render_frames

    def generate(
        self,
        prompt: str,
        frames: int,
        height: int,
        width: int,
        noise: Optional[np.ndarray] = None,
        seed: Optional[int] = None,
        image: Optional[bytes] = None,
    ) -> tuple:
        if noise is not None:
            latent = np.ascontiguousarray(noise, dtype=np.float32)
        else:
            rng = np.random.default_rng(seed)
            latent = rng.standard_normal(
                (self.channels, frames, height, width)
            ).astype(np.float32)
        rendered = None
        if self.render_frames:
            gray = latent.mean(axis=0)  # frames x height x width
            pixels = np.clip(
                np.floor(255.0 * (0.25 + 0.5 * gray) + 0.5), 0.0, 255.0
            ).astype(np.uint8)
            rendered = [encode_frame_png_b64(pixels[i]) for i in range(pixels.shape[0])]
        return latent, rendered


_DEFAULT_VLM_REPLY = (
    '{"analysis": {"reference_description": "stub reference reading", '
    '"new_generated_description": "stub current reading", '
    '"comparison": "stub comparison"}, '
    '"refined_prompt": "stub refinement, unchanged scene"}'
)


class StubVlm:
    """Returns a fixed, schema-conformant refinement reply."""

    def __init__(self, reply: str = _DEFAULT_VLM_REPLY) -> None:
        if not reply:
            raise ValueError("stub reply must be non-empty")
        self.reply = reply

    def refine(self, instruction: str, video: bytes) -> str:
        return self.reply


def build_generator_backend(choice: BackendChoice):
    if choice.name == "stub":
        return StubGenerator(**choice.options)
    raise ValueError(f"unknown generator backend {choice.name!r}")


def build_vlm_backend(choice: BackendChoice):
    if choice.name == "stub":
        return StubVlm(**choice.options)
    raise ValueError(f"unknown vlm backend {choice.name!r}")
