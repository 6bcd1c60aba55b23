"""Command-line front end.

Subcommands:
    optimize   full refinement run against configured backends
    simulate   full run with the in-process simulators
    invert     backward Euler pass over a latent tensor file
    enhance    two-stage SVD projection over a latent tensor file
    compose    stack 2 or 3 frame directories into a composite

A JSON config file (--config) can hold any OptimizationConfig key;
explicit flags win over the file, the file wins over built-in defaults.

Exit codes: 0 success, 2 usage, 3 validation/config, 4 backend/gateway,
5 numerical failure, 6 file I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from typing import Optional

from .flow import Condition, DivergenceError, IntegratorConfig, make_toy_field
from .flow import invert as invert_flow
from .gateway import GatewayError, RequestValidationError
from .media import MediaError, composite_manifest, load_frames, save_frames, vstack_videos
from .noise_prior import DegenerateSpectrumError, ProjectionThresholds, enhance_noise
from .orchestrator import (
    OptimizationConfig,
    TrajectoryIOError,
    persist_trajectory,
    run_optimization,
    synthesize_reference,
)
from .prompting import TemplateError, VlmParseError
from .tensors import TensorIOError, load_tensor, save_tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_BACKEND = 4
EXIT_NUMERICAL = 5
EXIT_IO = 6

_SIMULATE_SUBJECT = "a stone statue"
_SIMULATE_ENVIRONMENT = "a quiet courtyard"
_SIMULATE_EFFECT = "a slow crumbling collapse"


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--prompt", help="initial text prompt")
    parser.add_argument("--image", help="conditioning image (PNG) for image-to-video")
    parser.add_argument("--subject", help="subject phrase that must survive refinement")
    parser.add_argument("--environment", help="environment phrase that must survive refinement")
    parser.add_argument("--effect", help="desired visual effect description")
    parser.add_argument("--alpha", type=float, help="temporal prior blend weight")
    parser.add_argument("--rho-s", type=float, dest="rho_s", help="spatial suppression energy fraction")
    parser.add_argument("--rho-m", type=float, dest="rho_m", help="temporal retention energy fraction")
    parser.add_argument("--iters", type=int, help="refinement iterations")
    parser.add_argument("--steps", type=int, help="integrator steps")
    parser.add_argument("--seed", type=int, help="base seed for per-iteration fresh noise")
    parser.add_argument("--generator-url", dest="generator_url", help="video generator endpoint")
    parser.add_argument("--vlm-url", dest="vlm_url", help="VLM endpoint")
    parser.add_argument("--mode", choices=["text-to-video", "image-to-video"])
    parser.add_argument("--channels", type=int, help="latent channel count")
    parser.add_argument("--inversion-prompt", dest="inversion_condition", help="condition used for inversion")
    parser.add_argument("--field", dest="field_kind", choices=["constant", "linear", "target-attractor"])
    parser.add_argument("--field-value", dest="field_value", type=float, help="toy field parameter")
    parser.add_argument(
        "--noise-enhance", action=argparse.BooleanOptionalAction, default=None,
        help="blend the temporal noise prior into each iteration's sampling noise",
    )
    parser.add_argument(
        "--visual-context", action=argparse.BooleanOptionalAction, default=None,
        help="show the previous generation to the VLM",
    )
    parser.add_argument(
        "--logic-context", action=argparse.BooleanOptionalAction, default=None,
        help="embed the refinement history in the instruction",
    )
    parser.add_argument("--config", help="JSON file with config defaults (flags win)")
    parser.add_argument("--out-dir", dest="out_dir", default="vfxopt_run", help="run output directory")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfxopt",
        description="Transfer a reference clip's dynamic effect to new prompts via iterative refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="run the refinement loop against backends")
    p_opt.add_argument("--ref-video", dest="ref_video", required=True, help="reference frame directory")
    p_opt.add_argument(
        "--simulate", action=argparse.BooleanOptionalAction, default=None,
        help="use in-process simulated backends",
    )
    _add_run_flags(p_opt)

    p_sim = sub.add_parser("simulate", help="run the loop fully in-process")
    p_sim.add_argument("--ref-video", dest="ref_video", help="optional reference frame directory")
    p_sim.add_argument("--frames", type=int, help="synthesized reference frame count")
    p_sim.add_argument("--height", type=int, help="synthesized reference height")
    p_sim.add_argument("--width", type=int, help="synthesized reference width")
    p_sim.add_argument("--ref-intensity", dest="ref_intensity", type=float, default=0.8)
    p_sim.add_argument("--ref-onset", dest="ref_onset", type=float, default=0.0)
    p_sim.add_argument("--ref-speed", dest="ref_speed", choices=["slow", "fast"], default="slow")
    _add_run_flags(p_sim)

    p_inv = sub.add_parser("invert", help="recover noise from a latent tensor file")
    p_inv.add_argument("--input", required=True, help="latent NPY file")
    p_inv.add_argument("--output", required=True, help="where to write the recovered noise NPY")
    p_inv.add_argument("--steps", type=int, default=50)
    p_inv.add_argument("--horizon", type=float, default=1.0)
    p_inv.add_argument("--field", dest="field_kind", default="linear",
                       choices=["constant", "linear", "target-attractor"])
    p_inv.add_argument("--field-value", dest="field_value", type=float, default=0.5)
    p_inv.add_argument("--prompt", default="inversion", help="condition text for the field")

    p_enh = sub.add_parser("enhance", help="project a noise tensor file through both SVD stages")
    p_enh.add_argument("--input", required=True)
    p_enh.add_argument("--output", required=True)
    p_enh.add_argument("--rho-s", dest="rho_s", type=float, default=0.1)
    p_enh.add_argument("--rho-m", dest="rho_m", type=float, default=0.9)

    p_cmp = sub.add_parser("compose", help="stack frame directories into one composite")
    p_cmp.add_argument("--inputs", nargs="+", required=True, help="2 or 3 frame directories, reference first")
    p_cmp.add_argument("--out-dir", dest="out_dir", required=True)

    return parser


_RUN_KEYS = (
    ("alpha", "alpha"),
    ("rho_s", "rho_s"),
    ("rho_m", "rho_m"),
    ("iters", "i_max"),
    ("steps", "steps"),
    ("seed", "base_seed"),
    ("generator_url", "generator_url"),
    ("vlm_url", "vlm_url"),
    ("mode", "mode"),
    ("channels", "channels"),
    ("inversion_condition", "inversion_condition"),
    ("field_kind", "field_kind"),
    ("field_value", "field_value"),
    ("subject", "subject"),
    ("environment", "environment"),
    ("effect", "desired_effect"),
    ("noise_enhance", "noise_enhance"),
    ("visual_context", "visual_context"),
    ("logic_context", "logic_context"),
    ("frames", "frames"),
    ("height", "height"),
    ("width", "width"),
)


def _merge_run_config(args: argparse.Namespace, force_simulate: bool) -> OptimizationConfig:
    data: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        data.update(loaded)
    for arg_name, key in _RUN_KEYS:
        value = getattr(args, arg_name, None)
        if value is not None:
            data[key] = value
    if force_simulate:
        data["simulate"] = True
    elif getattr(args, "simulate", None) is not None:
        data["simulate"] = args.simulate
    return OptimizationConfig.from_dict(data)


def _run_command(args: argparse.Namespace, force_simulate: bool) -> int:
    config = _merge_run_config(args, force_simulate)

    if args.ref_video:
        reference, _ = load_frames(args.ref_video)
    elif config.simulate:
        reference = synthesize_reference(
            config,
            intensity=getattr(args, "ref_intensity", 0.8),
            onset=getattr(args, "ref_onset", 0.0),
            speed=getattr(args, "ref_speed", "slow"),
        )
    else:
        raise ValueError("--ref-video is required for non-simulated runs")

    if config.simulate and not (config.subject or config.environment or config.desired_effect):
        config = dataclasses.replace(
            config,
            subject=_SIMULATE_SUBJECT,
            environment=_SIMULATE_ENVIRONMENT,
            desired_effect=_SIMULATE_EFFECT,
        )

    prompt = args.prompt
    if prompt is None:
        if not config.simulate:
            raise ValueError("--prompt is required for non-simulated runs")
        prompt = (
            f"{config.subject} in {config.environment}, {config.desired_effect}, "
            "intensity=0.2 onset=0 speed=slow"
        )

    image_bytes: Optional[bytes] = None
    if args.image:
        with open(args.image, "rb") as fh:
            image_bytes = fh.read()

    result = run_optimization(config, reference, prompt, image=image_bytes)
    manifest_path = persist_trajectory(result, args.out_dir)
    print(f"final prompt: {result.final_prompt}")
    readings = [d for d in result.discrepancies if d is not None]
    if readings:
        print(f"effect-curve discrepancy: first {readings[0]:.4f}, last {readings[-1]:.4f}")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def _invert_command(args: argparse.Namespace) -> int:
    latent = load_tensor(args.input)
    if args.field_kind == "constant":
        field = make_toy_field("constant", value=args.field_value)
    elif args.field_kind == "linear":
        field = make_toy_field("linear", coefficient=args.field_value)
    else:
        field = make_toy_field("target-attractor", target=args.field_value, horizon=args.horizon)
    config = IntegratorConfig(steps=args.steps, horizon=args.horizon)
    recovered = invert_flow(field, latent, Condition(prompt=args.prompt), config)
    save_tensor(recovered, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _enhance_command(args: argparse.Namespace) -> int:
    noise = load_tensor(args.input)
    projected = enhance_noise(noise, ProjectionThresholds(rho_s=args.rho_s, rho_m=args.rho_m))
    save_tensor(projected, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _compose_command(args: argparse.Namespace) -> int:
    if not 2 <= len(args.inputs) <= 3:
        raise ValueError(f"compose takes 2 or 3 inputs, got {len(args.inputs)}")
    labels = ("A", "C") if len(args.inputs) == 2 else ("A", "B", "C")
    clips = []
    for directory, label in zip(args.inputs, labels):
        video, _ = load_frames(directory)
        clips.append(dataclasses.replace(video, label=label))
    composite = vstack_videos(clips)
    info = composite_manifest(clips, sources=list(args.inputs))
    save_frames(composite, args.out_dir, manifest=info)
    print(f"wrote composite: {args.out_dir} ({len(info['segments'])} segments)")
    return EXIT_OK


def _classify(exc: Exception) -> int:
    if isinstance(exc, (DegenerateSpectrumError, DivergenceError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (TensorIOError, MediaError, TrajectoryIOError, OSError)):
        return EXIT_IO
    if isinstance(exc, RequestValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, GatewayError):
        return EXIT_BACKEND
    if isinstance(exc, (ValueError, TemplateError, VlmParseError, json.JSONDecodeError, TypeError)):
        return EXIT_VALIDATION
    return 1


def main(argv: Optional[list] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "optimize":
            return _run_command(args, force_simulate=False)
        if args.command == "simulate":
            return _run_command(args, force_simulate=True)
        if args.command == "invert":
            return _invert_command(args)
        if args.command == "enhance":
            return _enhance_command(args)
        if args.command == "compose":
            return _compose_command(args)
        parser.error(f"unknown command {args.command!r}")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - single exit funnel for the CLI
        print(f"error: {exc}", file=sys.stderr)
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
