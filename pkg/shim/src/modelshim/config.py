"""Service configuration.

A config names exactly one backend per endpoint:

    {
      "generator": {"stub": {"channels": 4}},
      "vlm": {"stub": {}},
      "host": "127.0.0.1",
      "port": 8080
    }

Each endpoint section is a one-key mapping from backend name to its
options. `load_config` reads a JSON file, either by explicit path or
via the MODELSHIM_CONFIG environment variable; with neither set, both
endpoints fall back to the stub backend.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

CONFIG_ENV_VAR = "MODELSHIM_CONFIG"
KNOWN_GENERATOR_BACKENDS = ("stub",)
KNOWN_VLM_BACKENDS = ("stub",)


@dataclass(frozen=True)
class BackendChoice:
    name: str
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ShimConfig:
    generator: BackendChoice = BackendChoice("stub")
    vlm: BackendChoice = BackendChoice("stub")
    host: str = "127.0.0.1"
    port: int = 8080
    device: str = "cpu"
    precision: str = "fp32"

    def __post_init__(self) -> None:
        if self.generator.name not in KNOWN_GENERATOR_BACKENDS:
            raise ValueError(f"unknown generator backend {self.generator.name!r}")
        if self.vlm.name not in KNOWN_VLM_BACKENDS:
            raise ValueError(f"unknown vlm backend {self.vlm.name!r}")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")


def _backend_choice(section: object, endpoint: str) -> BackendChoice:
    if not isinstance(section, dict) or len(section) != 1:
        raise ValueError(f"{endpoint} section must name exactly one backend")
    name, options = next(iter(section.items()))
    if not isinstance(options, dict):
        raise ValueError(f"{endpoint} backend options must be an object")
    return BackendChoice(name=name, options=dict(options))


def config_from_dict(data: dict) -> ShimConfig:
    known = {"generator", "vlm", "host", "port", "device", "precision"}
    extra = set(data) - known
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    kwargs: dict = {}
    if "generator" in data:
        kwargs["generator"] = _backend_choice(data["generator"], "generator")
    if "vlm" in data:
        kwargs["vlm"] = _backend_choice(data["vlm"], "vlm")
    for key in ("host", "port", "device", "precision"):
        if key in data:
            kwargs[key] = data[key]
    return ShimConfig(**kwargs)


def load_config(path: Optional[str] = None) -> ShimConfig:
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return ShimConfig()
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return config_from_dict(data)
