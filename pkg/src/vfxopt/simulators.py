"""Deterministic in-process backends for desk-scale runs.

The simulated generator reads three control tokens out of the prompt:

    intensity=<0..1>   peak of the per-frame effect level
    onset=<0..1>       fraction of the clip before the effect starts
    speed=slow|fast    ramp length, 75% of the clip vs 25%

and emits a latent whose per-frame mean follows exactly that ramp, plus
a small zero-mean texture derived from the supplied sampling noise (or
seed).  Frames render the latent as grayscale through an affine map that
keeps every texture excursion inside 8-bit range, so the curve can be
recovered from pixels with sub-1/255 error.

The simulated VLM has two modes.  Scripted mode replays canned replies
and fails once they run out.  Oracle mode actually measures the effect
curves of segments A and C in the composite it receives, then emits a
schema-conformant JSON reply whose refined prompt moves every numeric
control token halfway toward the reference's measured value (pace is
adopted outright), leaving all other prompt text untouched.

Both backends are pure functions of (params, request), which is what
makes end-to-end runs bit-reproducible.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gateway import (
    GatewayError,
    GeneratorRequest,
    GeneratorResponse,
    RequestValidationError,
    VlmRequest,
    VlmResponse,
    decode_tensor_b64,
    encode_tensor_b64,
    encode_video_frames_b64,
)
from .media import VideoFrames, unpack_video_zip
from .tensors import LatentTensor, TensorShape, gaussian_noise

# Grayscale mapping: latent value v -> pixel 255 * (PIXEL_BIAS + PIXEL_GAIN * v).
PIXEL_BIAS = 0.25
PIXEL_GAIN = 0.5

SLOW_RAMP_FRACTION = 0.75
FAST_RAMP_FRACTION = 0.25

_TOKEN_PATTERNS = {
    "intensity": re.compile(r"intensity=([0-9]*\.?[0-9]+)"),
    "onset": re.compile(r"onset=([0-9]*\.?[0-9]+)"),
    "speed": re.compile(r"speed=(slow|fast)"),
}


class ExhaustedScriptError(GatewayError):
    """Scripted VLM ran out of canned replies."""


@dataclass(frozen=True)
class EffectTokens:
    intensity: float = 0.5
    onset: float = 0.0
    speed: str = "slow"


def parse_effect_tokens(prompt: str, defaults: EffectTokens = EffectTokens()) -> EffectTokens:
    """Extract control tokens from a prompt, falling back to defaults."""
    intensity = defaults.intensity
    onset = defaults.onset
    speed = defaults.speed
    match = _TOKEN_PATTERNS["intensity"].search(prompt)
    if match:
        intensity = min(1.0, max(0.0, float(match.group(1))))
    match = _TOKEN_PATTERNS["onset"].search(prompt)
    if match:
        onset = min(1.0, max(0.0, float(match.group(1))))
    match = _TOKEN_PATTERNS["speed"].search(prompt)
    if match:
        speed = match.group(1)
    return EffectTokens(intensity=intensity, onset=onset, speed=speed)


def effect_curve_from_tokens(tokens: EffectTokens, frames: int) -> np.ndarray:
    """Per-frame effect level: zero before onset, linear ramp to the peak after."""
    ramp_fraction = SLOW_RAMP_FRACTION if tokens.speed == "slow" else FAST_RAMP_FRACTION
    ramp_length = ramp_fraction * frames
    start = tokens.onset * frames
    curve = np.zeros(frames, dtype=np.float64)
    for f in range(frames):
        if f < start:
            continue
        curve[f] = tokens.intensity * min(1.0, (f - start + 1.0) / ramp_length)
    return curve


def measure_effect_curve(latent: LatentTensor) -> np.ndarray:
    """Per-frame mean over channels and pixels."""
    return latent.data.astype(np.float64).mean(axis=(0, 2, 3))


def latent_to_video(latent: LatentTensor, fps: float, label: str = "") -> VideoFrames:
    """Render each frame of the latent as grayscale RGB."""
    gray = latent.data.astype(np.float64).mean(axis=0)  # (F, H, W)
    scaled = 255.0 * (PIXEL_BIAS + PIXEL_GAIN * gray)
    pixels = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    frames = [np.repeat(p[:, :, None], 3, axis=2) for p in pixels]
    return VideoFrames(frames, fps, label)


def video_to_latent(video: VideoFrames, channels: int) -> LatentTensor:
    """Invert the grayscale rendering, replicating the value per channel."""
    stack = np.stack([f.astype(np.float64).mean(axis=2) for f in video.frames])  # (F, H, W)
    values = (stack / 255.0 - PIXEL_BIAS) / PIXEL_GAIN
    data = np.broadcast_to(values[None, :, :, :], (channels,) + values.shape)
    return LatentTensor(np.ascontiguousarray(data, dtype=np.float32))


def measure_curve_from_frames(frames: list) -> np.ndarray:
    """Recover the effect curve from rendered grayscale frames."""
    means = np.array([f.astype(np.float64).mean() / 255.0 for f in frames])
    return (means - PIXEL_BIAS) / PIXEL_GAIN


def _demean_per_frame(data: np.ndarray) -> np.ndarray:
    return data - data.mean(axis=(0, 2, 3), keepdims=True)


@dataclass(frozen=True)
class GeneratorSimParams:
    channels: int = 4
    fps: float = 8.0
    texture_scale: float = 0.05
    defaults: EffectTokens = EffectTokens()


class SimulatedGenerator:
    """Prompt-token-driven generator; pure in (params, request)."""

    def __init__(self, params: GeneratorSimParams = GeneratorSimParams()) -> None:
        self.params = params

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        request.validate()
        if request.noise_b64 is not None:
            noise = decode_tensor_b64(request.noise_b64)
            shape = noise.shape
            if (shape.f, shape.h, shape.w) != (request.frames, request.height, request.width):
                raise RequestValidationError(
                    f"noise geometry {shape.as_tuple()} disagrees with request"
                )
        else:
            noise = gaussian_noise(
                TensorShape(self.params.channels, request.frames, request.height, request.width),
                request.seed,
            )
        tokens = parse_effect_tokens(request.prompt, self.params.defaults)
        curve = effect_curve_from_tokens(tokens, request.frames)
        texture = self.params.texture_scale * _demean_per_frame(noise.data.astype(np.float64))
        latent = LatentTensor(
            (curve[None, :, None, None] + texture).astype(np.float32)
        )
        video = latent_to_video(latent, self.params.fps)
        return GeneratorResponse(
            latent_b64=encode_tensor_b64(latent),
            frames_b64=encode_video_frames_b64(video),
        )


def _snap(value: float, grid: float) -> float:
    return float(np.floor(value / grid + 0.5) * grid)


def format_token_value(value: float) -> str:
    text = f"{value:.4f}".rstrip("0").rstrip(".")
    return text if text else "0"


def _set_token(prompt: str, name: str, value_text: str) -> str:
    pattern = re.compile(name + r"=[^\s,]+")
    replacement = f"{name}={value_text}"
    if pattern.search(prompt):
        return pattern.sub(replacement, prompt)
    return f"{prompt} {replacement}"


def _segment_curves(video: VideoFrames, manifest: dict) -> dict:
    curves = {}
    for segment in manifest.get("segments", []):
        label = segment.get("label")
        y0 = segment["y_offset"]
        y1 = y0 + segment["height"]
        curves[label] = measure_curve_from_frames([f[y0:y1] for f in video.frames])
    return curves


def _estimate_tokens(curve: np.ndarray, grid: float) -> Optional[EffectTokens]:
    peak = float(curve.max())
    intensity = _snap(peak, grid)
    if intensity <= 0.0:
        return None
    frames = len(curve)
    nonzero = np.nonzero(curve > 0.005)[0]
    if nonzero.size == 0:
        return None
    onset = _snap(nonzero[0] / frames, grid)
    full = int(np.nonzero(curve >= 0.95 * peak)[0][0])
    ramp_fraction = (full - nonzero[0] + 1) / frames
    speed = "slow" if ramp_fraction > 0.5 else "fast"
    return EffectTokens(intensity=intensity, onset=onset, speed=speed)


def _instruction_field(instruction: str, prefix: str) -> str:
    value = ""
    for line in instruction.splitlines():
        if line.startswith(prefix):
            value = line[len(prefix):].strip()
    return value


class SimulatedVlm:
    """Either replays a script or plays a measuring oracle.

    Oracle replies always satisfy the response schema, so it doubles as
    the well-behaved endpoint in loop tests.
    """

    def __init__(self, script: Optional[list] = None, grid: float = 0.01) -> None:
        self.script = list(script) if script is not None else None
        self.grid = grid
        self.calls = 0

    def refine(self, request: VlmRequest) -> VlmResponse:
        request.validate()
        self.calls += 1
        if self.script is not None:
            if not self.script:
                raise ExhaustedScriptError(f"script exhausted after {self.calls - 1} replies")
            return VlmResponse(text=self.script.pop(0))
        return VlmResponse(text=self._oracle_reply(request))

    def _oracle_reply(self, request: VlmRequest) -> str:
        current_prompt = _instruction_field(request.instruction, "Current prompt: ")
        video, manifest = unpack_video_zip(base64.b64decode(request.video_b64))
        curves = _segment_curves(video, manifest)
        if "A" not in curves or "C" not in curves:
            raise RequestValidationError("composite must carry segments A and C")

        reference = _estimate_tokens(curves["A"], self.grid)
        current_tokens = parse_effect_tokens(current_prompt)
        refined = current_prompt
        if reference is not None:
            refined = _set_token(
                refined,
                "intensity",
                format_token_value((current_tokens.intensity + reference.intensity) / 2.0),
            )
            refined = _set_token(
                refined,
                "onset",
                format_token_value((current_tokens.onset + reference.onset) / 2.0),
            )
            refined = _set_token(refined, "speed", reference.speed)

        def describe(label: str) -> str:
            curve = curves[label]
            tokens = _estimate_tokens(curve, self.grid)
            if tokens is None:
                return f'segment {label} shows no measurable effect energy.'
            return (
                f"segment {label} effect peaks at {tokens.intensity:.2f} after onset "
                f"{tokens.onset:.2f} with a {tokens.speed} ramp."
            )

        gap = float(np.abs(curves["A"] - curves["C"]).max())
        analysis = {
            "reference_description": describe("A"),
            "new_generated_description": describe("C"),
            "comparison": (
                f"largest per-frame effect gap between C and A is {gap:.4f}; "
                "moving the control tokens toward the reference pacing."
            ),
        }
        if "B" in curves:
            analysis["last_generated_description"] = describe("B")
        return json.dumps({"analysis": analysis, "refined_prompt": refined}, sort_keys=True)
