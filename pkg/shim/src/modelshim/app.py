"""HTTP surface of the service.

Bodies are validated by hand so every rejection comes back as a 400
with `{"code": "validation", "message": ...}`, and backend outages as
a 503 with `{"code": "backend-unavailable", ...}`, the status and
shape the clients on the other side of the wire key on.
"""

import json

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .backends import BackendUnavailableError, build_generator_backend, build_vlm_backend
from .codec import CodecError, decode_b64, decode_latent_b64, encode_array_b64
from .config import ShimConfig

GENERATE_KEYS = {"prompt", "frames", "height", "width", "noise_b64", "seed", "image_b64"}
REFINE_KEYS = {"instruction", "video_b64"}


class _ValidationFailure(ValueError):
    pass


def _reject(message: str) -> JSONResponse:
    return JSONResponse(status_code=400, content={"code": "validation", "message": message})


def _unavailable(message: str) -> JSONResponse:
    return JSONResponse(
        status_code=503, content={"code": "backend-unavailable", "message": message}
    )


async def _read_object(request: Request) -> dict:
    try:
        body = await request.json()
    except json.JSONDecodeError as exc:
        raise _ValidationFailure(f"body is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise _ValidationFailure("body must be a JSON object")
    return body


def _require_positive_int(body: dict, key: str) -> int:
    value = body[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise _ValidationFailure(f"{key} must be a positive integer, got {value!r}")
    return value


def _parse_generate_body(body: dict) -> dict:
    extra = set(body) - GENERATE_KEYS
    if extra:
        raise _ValidationFailure(f"unknown generate keys: {sorted(extra)}")
    missing = {"prompt", "frames", "height", "width"} - set(body)
    if missing:
        raise _ValidationFailure(f"missing generate keys: {sorted(missing)}")
    if not isinstance(body["prompt"], str):
        raise _ValidationFailure("prompt must be a string")
    parsed = {
        "prompt": body["prompt"],
        "frames": _require_positive_int(body, "frames"),
        "height": _require_positive_int(body, "height"),
        "width": _require_positive_int(body, "width"),
        "noise": None,
        "seed": None,
        "image": None,
    }

    has_noise = body.get("noise_b64") is not None
    has_seed = body.get("seed") is not None
    if has_noise == has_seed:
        raise _ValidationFailure("exactly one of noise_b64 or seed must be supplied")
    if has_seed:
        seed = body["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise _ValidationFailure(f"seed must be a non-negative integer, got {seed!r}")
        parsed["seed"] = seed
    if has_noise:
        if not isinstance(body["noise_b64"], str):
            raise _ValidationFailure("noise_b64 must be a string")
        try:
            noise = decode_latent_b64(body["noise_b64"])
        except CodecError as exc:
            raise _ValidationFailure(str(exc)) from exc
        if noise.shape[1:] != (parsed["frames"], parsed["height"], parsed["width"]):
            raise _ValidationFailure(
                f"noise geometry {noise.shape} disagrees with requested "
                f"{(parsed['frames'], parsed['height'], parsed['width'])}"
            )
        parsed["noise"] = noise
    if body.get("image_b64") is not None:
        if not isinstance(body["image_b64"], str):
            raise _ValidationFailure("image_b64 must be a string")
        try:
            parsed["image"] = decode_b64(body["image_b64"])
        except CodecError as exc:
            raise _ValidationFailure(str(exc)) from exc
    return parsed


def _parse_refine_body(body: dict) -> tuple:
    extra = set(body) - REFINE_KEYS
    if extra:
        raise _ValidationFailure(f"unknown refine keys: {sorted(extra)}")
    missing = REFINE_KEYS - set(body)
    if missing:
        raise _ValidationFailure(f"missing refine keys: {sorted(missing)}")
    instruction, video_b64 = body["instruction"], body["video_b64"]
    if not isinstance(instruction, str) or not instruction:
        raise _ValidationFailure("instruction must be a non-empty string")
    if not isinstance(video_b64, str) or not video_b64:
        raise _ValidationFailure("video_b64 must be a non-empty string")
    try:
        video = decode_b64(video_b64)
    except CodecError as exc:
        raise _ValidationFailure(str(exc)) from exc
    return instruction, video


def create_app(generator_backend, vlm_backend) -> FastAPI:
    app = FastAPI(title="modelshim", docs_url=None, redoc_url=None)

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.post("/v1/generate")
    async def generate(request: Request):
        try:
            parsed = _parse_generate_body(await _read_object(request))
        except _ValidationFailure as exc:
            return _reject(str(exc))
        try:
            latent, rendered = generator_backend.generate(
                prompt=parsed["prompt"],
                frames=parsed["frames"],
                height=parsed["height"],
                width=parsed["width"],
                noise=parsed["noise"],
                seed=parsed["seed"],
                image=parsed["image"],
            )
        except BackendUnavailableError as exc:
            return _unavailable(str(exc))
        payload = {"latent_b64": encode_array_b64(np.asarray(latent, dtype=np.float32))}
        if rendered is not None:
            payload["frames_b64"] = list(rendered)
        return JSONResponse(content=payload)

    @app.post("/v1/vlm/refine")
    async def refine(request: Request):
        try:
            instruction, video = _parse_refine_body(await _read_object(request))
        except _ValidationFailure as exc:
            return _reject(str(exc))
        try:
            text = vlm_backend.refine(instruction, video)
        except BackendUnavailableError as exc:
            return _unavailable(str(exc))
        return JSONResponse(content={"text": text})

    return app


def app_from_config(config: ShimConfig) -> FastAPI:
    return create_app(
        build_generator_backend(config.generator),
        build_vlm_backend(config.vlm),
    )
