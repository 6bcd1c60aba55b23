"""Adapter service exposing generation and VLM backends over the wire protocol."""

from .app import app_from_config, create_app
from .backends import (
    BackendUnavailableError,
    StubGenerator,
    StubVlm,
    build_generator_backend,
    build_vlm_backend,
)
from .codec import CodecError, decode_b64, decode_latent_b64, encode_array_b64, encode_frame_png_b64
from .config import BackendChoice, ShimConfig, config_from_dict, load_config
from .serve import main, serve

__all__ = [
    "BackendChoice",
    "BackendUnavailableError",
    "CodecError",
    "ShimConfig",
    "StubGenerator",
    "StubVlm",
    "app_from_config",
    "build_generator_backend",
    "build_vlm_backend",
    "config_from_dict",
    "create_app",
    "decode_b64",
    "decode_latent_b64",
    "encode_array_b64",
    "encode_frame_png_b64",
    "load_config",
    "main",
    "serve",
]
