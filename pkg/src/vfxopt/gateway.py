"""Clients for the video generator and VLM services.

The wire protocol is JSON over HTTP with base64 payloads: latent
tensors travel as NPY bytes, videos as zip archives of PNG frames plus
a manifest.  Two endpoints exist:

    POST {base}/v1/generate   -> {"latent_b64": ..., "frames_b64": [...]}
    POST {base}/v1/vlm/refine -> {"text": ...}

Failures carry {"code", "message"} with a 4xx status for validation and
5xx for backend trouble.  Clients retry transport and timeout failures
at most `retries` times (validation and backend rejections never retry)
and validate every response payload before handing it back, so callers
only ever see decoded, shape-checked results or a typed error.

Backends are pluggable: the HTTP classes here talk to a real service,
while the simulators module provides in-process stand-ins that speak
the exact same payload formats.
"""

from __future__ import annotations

import base64
import binascii
from dataclasses import dataclass
from typing import Optional

import requests

from .media import VideoFrames, decode_frame_png, encode_frame_png
from .tensors import LatentTensor, TensorIOError, tensor_from_npy_bytes, tensor_to_npy_bytes

DEFAULT_GENERATOR_TIMEOUT = 600.0
DEFAULT_VLM_TIMEOUT = 120.0
DEFAULT_RETRIES = 2
DEFAULT_FRAME_RATE = 8.0

GENERATE_PATH = "/v1/generate"
VLM_REFINE_PATH = "/v1/vlm/refine"


class GatewayError(Exception):
    """Base class; `retryable` drives the client retry loop."""

    retryable = False


class RequestValidationError(GatewayError):
    """Request violates the wire contract; never sent, never retried."""


class TransportError(GatewayError):
    retryable = True


class GatewayTimeoutError(GatewayError):
    retryable = True


class BackendError(GatewayError):
    """The service answered with an error payload (4xx or 5xx)."""

    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(f"backend error {status} [{code}]: {message}")
        self.status = status
        self.code = code


class PayloadError(GatewayError):
    """A 2xx response whose body does not decode per the wire contract."""


class ShapeMismatchError(GatewayError):
    """Returned latent geometry disagrees with the request."""


def encode_tensor_b64(tensor: LatentTensor) -> str:
    return base64.b64encode(tensor_to_npy_bytes(tensor)).decode("ascii")


def decode_tensor_b64(payload: str) -> LatentTensor:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise PayloadError(f"latent payload is not valid base64: {exc}") from exc
    try:
        return tensor_from_npy_bytes(raw)
    except (TensorIOError, ValueError) as exc:
        raise PayloadError(f"latent payload does not decode: {exc}") from exc


@dataclass(frozen=True)
class GeneratorRequest:
    """One video generation call.

    Sampling noise comes either inline (`noise_b64`, an NPY payload) or
    as a server-side `seed`; exactly one of the two must be set.
    """

    prompt: str
    frames: int
    height: int
    width: int
    noise_b64: Optional[str] = None
    seed: Optional[int] = None
    image_b64: Optional[str] = None

    def validate(self) -> None:
        if (self.noise_b64 is None) == (self.seed is None):
            raise RequestValidationError("exactly one of noise_b64 or seed must be supplied")
        if self.seed is not None and self.seed < 0:
            raise RequestValidationError(f"seed must be non-negative, got {self.seed}")
        for name, value in (("frames", self.frames), ("height", self.height), ("width", self.width)):
            if not isinstance(value, int) or value < 1:
                raise RequestValidationError(f"{name} must be a positive int, got {value!r}")

    def to_wire(self) -> dict:
        self.validate()
        body: dict = {
            "prompt": self.prompt,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
        }
        if self.noise_b64 is not None:
            body["noise_b64"] = self.noise_b64
        if self.seed is not None:
            body["seed"] = self.seed
        if self.image_b64 is not None:
            body["image_b64"] = self.image_b64
        return body

    @classmethod
    def from_wire(cls, body: dict) -> "GeneratorRequest":
        known = {"prompt", "frames", "height", "width", "noise_b64", "seed", "image_b64"}
        extra = set(body) - known
        if extra:
            raise RequestValidationError(f"unknown generate keys: {sorted(extra)}")
        missing = {"prompt", "frames", "height", "width"} - set(body)
        if missing:
            raise RequestValidationError(f"missing generate keys: {sorted(missing)}")
        req = cls(
            prompt=body["prompt"],
            frames=body["frames"],
            height=body["height"],
            width=body["width"],
            noise_b64=body.get("noise_b64"),
            seed=body.get("seed"),
            image_b64=body.get("image_b64"),
        )
        req.validate()
        return req


@dataclass(frozen=True)
class GeneratorResponse:
    latent_b64: str
    frames_b64: Optional[list] = None

    def to_wire(self) -> dict:
        body: dict = {"latent_b64": self.latent_b64}
        if self.frames_b64 is not None:
            body["frames_b64"] = list(self.frames_b64)
        return body

    @classmethod
    def from_wire(cls, body: dict) -> "GeneratorResponse":
        extra = set(body) - {"latent_b64", "frames_b64"}
        if extra:
            raise PayloadError(f"unknown generate response keys: {sorted(extra)}")
        if "latent_b64" not in body:
            raise PayloadError("generate response lacks latent_b64")
        return cls(latent_b64=body["latent_b64"], frames_b64=body.get("frames_b64"))


@dataclass(frozen=True)
class VlmRequest:
    """One refinement call: the full instruction plus the composite video."""

    instruction: str
    video_b64: str

    def validate(self) -> None:
        if not self.instruction:
            raise RequestValidationError("instruction must be non-empty")
        if not self.video_b64:
            raise RequestValidationError("video_b64 must be non-empty")

    def to_wire(self) -> dict:
        self.validate()
        return {"instruction": self.instruction, "video_b64": self.video_b64}

    @classmethod
    def from_wire(cls, body: dict) -> "VlmRequest":
        extra = set(body) - {"instruction", "video_b64"}
        if extra:
            raise RequestValidationError(f"unknown refine keys: {sorted(extra)}")
        missing = {"instruction", "video_b64"} - set(body)
        if missing:
            raise RequestValidationError(f"missing refine keys: {sorted(missing)}")
        req = cls(instruction=body["instruction"], video_b64=body["video_b64"])
        req.validate()
        return req


@dataclass(frozen=True)
class VlmResponse:
    text: str

    def to_wire(self) -> dict:
        return {"text": self.text}

    @classmethod
    def from_wire(cls, body: dict) -> "VlmResponse":
        if "text" not in body or not isinstance(body["text"], str) or not body["text"]:
            raise PayloadError("refine response must carry non-empty text")
        return cls(text=body["text"])


@dataclass(frozen=True)
class GeneratorResult:
    """Decoded generation output: the latent plus rendered frames, if any."""

    latent: LatentTensor
    video: Optional[VideoFrames]
    response: GeneratorResponse


def encode_video_frames_b64(video: VideoFrames) -> list:
    return [base64.b64encode(encode_frame_png(f)).decode("ascii") for f in video.frames]


def _decode_frames_b64(frames_b64: list, fps: float) -> VideoFrames:
    frames = []
    for i, item in enumerate(frames_b64):
        try:
            frames.append(decode_frame_png(base64.b64decode(item, validate=True)))
        except Exception as exc:
            raise PayloadError(f"frame {i} does not decode: {exc}") from exc
    return VideoFrames(frames, fps)


def _map_http_error(response: requests.Response) -> BackendError:
    try:
        body = response.json()
        code = str(body.get("code", "unknown"))
        message = str(body.get("message", response.text[:200]))
    except ValueError:
        code, message = "unknown", response.text[:200]
    return BackendError(response.status_code, code, message)


class _HttpBackend:
    def __init__(
        self,
        base_url: str,
        path: str,
        timeout: float,
        token: Optional[str] = None,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.url = base_url.rstrip("/") + path
        self.timeout = timeout
        self.token = token
        self.session = session or requests.Session()

    def _post(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            response = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout)
        except requests.Timeout as exc:
            raise GatewayTimeoutError(f"no answer from {self.url} within {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise TransportError(f"transport failure talking to {self.url}: {exc}") from exc
        if not 200 <= response.status_code < 300:
            raise _map_http_error(response)
        try:
            return response.json()
        except ValueError as exc:
            raise PayloadError(f"response from {self.url} is not JSON: {exc}") from exc


class HttpGeneratorBackend(_HttpBackend):
    def __init__(self, base_url: str, timeout: float = DEFAULT_GENERATOR_TIMEOUT, **kwargs) -> None:
        super().__init__(base_url, GENERATE_PATH, timeout, **kwargs)

    def generate(self, request: GeneratorRequest) -> GeneratorResponse:
        return GeneratorResponse.from_wire(self._post(request.to_wire()))


class HttpVlmBackend(_HttpBackend):
    def __init__(self, base_url: str, timeout: float = DEFAULT_VLM_TIMEOUT, **kwargs) -> None:
        super().__init__(base_url, VLM_REFINE_PATH, timeout, **kwargs)

    def refine(self, request: VlmRequest) -> VlmResponse:
        return VlmResponse.from_wire(self._post(request.to_wire()))


def _run_with_retries(call, retries: int):
    attempts = max(0, retries) + 1
    for attempt in range(attempts):
        try:
            return call()
        except GatewayError as exc:
            if not exc.retryable or attempt == attempts - 1:
                raise
    raise AssertionError("unreachable")


class GeneratorClient:
    """Validating, retrying front for a generator backend.

    `frame_rate` is stamped onto decoded frame lists; the wire response
    does not carry one.
    """

    def __init__(self, backend, retries: int = DEFAULT_RETRIES, frame_rate: float = DEFAULT_FRAME_RATE) -> None:
        self.backend = backend
        self.retries = retries
        self.frame_rate = frame_rate

    def generate(self, request: GeneratorRequest) -> GeneratorResult:
        request.validate()
        expected_channels = None
        if request.noise_b64 is not None:
            noise = decode_tensor_b64(request.noise_b64)
            noise_shape = noise.shape
            if (noise_shape.f, noise_shape.h, noise_shape.w) != (
                request.frames,
                request.height,
                request.width,
            ):
                raise RequestValidationError(
                    f"noise geometry {noise_shape.as_tuple()} disagrees with requested "
                    f"{(request.frames, request.height, request.width)}"
                )
            expected_channels = noise_shape.c

        response = _run_with_retries(lambda: self.backend.generate(request), self.retries)
        latent = decode_tensor_b64(response.latent_b64)
        shape = latent.shape
        if (shape.f, shape.h, shape.w) != (request.frames, request.height, request.width):
            raise ShapeMismatchError(
                f"latent geometry {shape.as_tuple()} disagrees with requested "
                f"{(request.frames, request.height, request.width)}"
            )
        if expected_channels is not None and shape.c != expected_channels:
            raise ShapeMismatchError(
                f"latent has {shape.c} channels, supplied noise has {expected_channels}"
            )
        video = None
        if response.frames_b64:
            video = _decode_frames_b64(response.frames_b64, self.frame_rate)
        return GeneratorResult(latent=latent, video=video, response=response)


class VlmClient:
    """Validating, retrying front for a VLM backend."""

    def __init__(self, backend, retries: int = DEFAULT_RETRIES) -> None:
        self.backend = backend
        self.retries = retries

    def refine(self, request: VlmRequest) -> VlmResponse:
        request.validate()
        response = _run_with_retries(lambda: self.backend.refine(request), self.retries)
        if not response.text:
            raise PayloadError("VLM returned empty text")
        return response
