"""Process entry point: `modelshim --config shim.json`."""

import argparse
from typing import Optional

import uvicorn

from .app import app_from_config
from .config import ShimConfig, load_config


def serve(config: ShimConfig) -> None:
    uvicorn.run(app_from_config(config), host=config.host, port=config.port)


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="modelshim",
        description="Serve video-generation and VLM backends over the JSON wire protocol.",
    )
    parser.add_argument("--config", help="JSON config file (default: $MODELSHIM_CONFIG or stubs)")
    args = parser.parse_args(argv)
    serve(load_config(args.config))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
