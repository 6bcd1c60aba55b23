"""The optimization loop: invert once, then generate/compare/refine.

One run takes a reference clip and an initial prompt.  The reference is
encoded to a latent, inverted through the configured velocity field,
and filtered into a temporal noise prior.  Each iteration then

    1. draws fresh noise with seed = base_seed + i,
    2. blends it with the prior (variance preserving, weight alpha),
    3. asks the generator for a video under the current prompt,
    4. stacks reference / previous / current into a composite,
    5. asks the VLM for an analysis and a refined prompt,
    6. accepts the refinement only if subject and environment survive,
       carrying the old prompt forward otherwise,
    7. appends the step to the history the next instruction embeds.

Three switches turn parts off for comparison runs: `noise_enhance`
(off = pure random sampling noise), `visual_context` (off = never show
the previous generation), `logic_context` (off = no history in the
instruction).  Every run writes a manifest that records which variant
produced it.

All artifacts (noise tensors, latents, frame dirs, composites) persist
under one directory with relative references, so two identical
simulated runs produce byte-identical trees.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .flow import Condition, IntegratorConfig, VelocityField, invert, make_toy_field
from .gateway import (
    GeneratorClient,
    GeneratorRequest,
    HttpGeneratorBackend,
    HttpVlmBackend,
    VlmClient,
    VlmRequest,
    encode_tensor_b64,
)
from .media import (
    VideoFrames,
    composite_manifest,
    load_frames,
    pack_video_zip,
    save_frames,
    vstack_videos,
)
from .noise_prior import BlendWeight, ProjectionThresholds, blend, enhance_noise
from .prompting import (
    PromptState,
    Trajectory,
    VlmAnalysis,
    VlmParseError,
    build_instruction,
    enforce_content_constraints,
    memory_digest,
    parse_vlm_response,
    select_visual_context,
    update_history,
)
from .simulators import (
    GeneratorSimParams,
    SimulatedGenerator,
    SimulatedVlm,
    latent_to_video,
    measure_effect_curve,
    video_to_latent,
)
from .tensors import LatentTensor, TensorShape, gaussian_noise, load_tensor, save_tensor

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
GENERATOR_TOKEN_ENV = "VFXOPT_GENERATOR_TOKEN"
VLM_TOKEN_ENV = "VFXOPT_VLM_TOKEN"

MODE_TEXT_TO_VIDEO = "text-to-video"
MODE_IMAGE_TO_VIDEO = "image-to-video"


class TrajectoryIOError(Exception):
    """Persisted run directory is unreadable or incomplete."""


class SchemaVersionError(TrajectoryIOError):
    """Persisted manifest was written by an incompatible layout."""


@dataclass(frozen=True)
class OptimizationConfig:
    """Everything a run needs beyond the reference clip and initial prompt."""

    alpha: BlendWeight = BlendWeight()
    thresholds: ProjectionThresholds = ProjectionThresholds()
    i_max: int = 10
    integrator: IntegratorConfig = IntegratorConfig()
    base_seed: int = 0
    mode: str = MODE_TEXT_TO_VIDEO
    inversion_condition: Optional[str] = None
    subject: str = ""
    environment: str = ""
    desired_effect: str = ""
    generator_url: Optional[str] = None
    vlm_url: Optional[str] = None
    simulate: bool = False
    noise_enhance: bool = True
    visual_context: bool = True
    logic_context: bool = True
    field_kind: str = "linear"
    field_value: float = 0.5
    channels: int = 4
    frames: int = 16
    height: int = 16
    width: int = 16
    retries: int = 2
    vlm_retry_cap: int = 3

    def __post_init__(self) -> None:
        if self.i_max < 1:
            raise ValueError(f"i_max must be >= 1, got {self.i_max}")
        if self.mode not in (MODE_TEXT_TO_VIDEO, MODE_IMAGE_TO_VIDEO):
            raise ValueError(f"mode must be text-to-video or image-to-video, got {self.mode!r}")
        if self.base_seed < 0:
            raise ValueError(f"base_seed must be non-negative, got {self.base_seed}")
        if not self.simulate and (not self.generator_url or not self.vlm_url):
            raise ValueError("non-simulated runs need generator_url and vlm_url")
        if self.vlm_retry_cap < 0:
            raise ValueError("vlm_retry_cap must be >= 0")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.alpha,
            "rho_s": self.thresholds.rho_s,
            "rho_m": self.thresholds.rho_m,
            "i_max": self.i_max,
            "steps": self.integrator.steps,
            "horizon": self.integrator.horizon,
            "base_seed": self.base_seed,
            "mode": self.mode,
            "inversion_condition": self.inversion_condition,
            "subject": self.subject,
            "environment": self.environment,
            "desired_effect": self.desired_effect,
            "generator_url": self.generator_url,
            "vlm_url": self.vlm_url,
            "simulate": self.simulate,
            "noise_enhance": self.noise_enhance,
            "visual_context": self.visual_context,
            "logic_context": self.logic_context,
            "field_kind": self.field_kind,
            "field_value": self.field_value,
            "channels": self.channels,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "retries": self.retries,
            "vlm_retry_cap": self.vlm_retry_cap,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizationConfig":
        known = {f.name for f in dataclasses.fields(cls)} | {
            "alpha",
            "rho_s",
            "rho_m",
            "steps",
            "horizon",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        alpha = BlendWeight(kwargs.pop("alpha", BlendWeight().alpha))
        thresholds = ProjectionThresholds(
            rho_s=kwargs.pop("rho_s", ProjectionThresholds().rho_s),
            rho_m=kwargs.pop("rho_m", ProjectionThresholds().rho_m),
        )
        integrator = IntegratorConfig(
            steps=kwargs.pop("steps", IntegratorConfig().steps),
            horizon=kwargs.pop("horizon", IntegratorConfig().horizon),
        )
        kwargs.pop("thresholds", None)
        kwargs.pop("integrator", None)
        return cls(alpha=alpha, thresholds=thresholds, integrator=integrator, **kwargs)


@dataclass
class IterationOutput:
    """Everything one loop pass produced."""

    index: int
    prompt: str
    refined_prompt: str
    accepted: bool
    analysis: VlmAnalysis
    vlm_attempts: int
    noise: LatentTensor
    latent: LatentTensor
    video: VideoFrames
    composite: VideoFrames
    composite_info: dict
    discrepancy: Optional[float] = None


@dataclass
class OptimizationResult:
    config: OptimizationConfig
    final_prompt: str
    trajectory: Trajectory
    iterations: list
    reference: VideoFrames
    inverted_noise: LatentTensor
    temporal_prior: Optional[LatentTensor]

    @property
    def final_video(self) -> VideoFrames:
        return self.iterations[-1].video

    @property
    def discrepancies(self) -> list:
        return [it.discrepancy for it in self.iterations]


def build_clients(config: OptimizationConfig) -> tuple[GeneratorClient, VlmClient]:
    """Simulators for simulate mode, HTTP backends otherwise."""
    if config.simulate:
        generator_backend = SimulatedGenerator(GeneratorSimParams(channels=config.channels))
        vlm_backend = SimulatedVlm()
    else:
        generator_backend = HttpGeneratorBackend(
            config.generator_url, token=os.environ.get(GENERATOR_TOKEN_ENV)
        )
        vlm_backend = HttpVlmBackend(config.vlm_url, token=os.environ.get(VLM_TOKEN_ENV))
    return (
        GeneratorClient(generator_backend, retries=config.retries),
        VlmClient(vlm_backend, retries=config.retries),
    )


def _inversion_field(config: OptimizationConfig) -> VelocityField:
    if config.field_kind == "constant":
        return make_toy_field("constant", value=config.field_value)
    if config.field_kind == "linear":
        return make_toy_field("linear", coefficient=config.field_value)
    if config.field_kind == "target-attractor":
        return make_toy_field(
            "target-attractor", target=config.field_value, horizon=config.integrator.horizon
        )
    raise ValueError(f"unknown field kind {config.field_kind!r}")


def _placeholder_analysis(current_prompt: str, reason: str) -> VlmAnalysis:
    return VlmAnalysis(
        reference_description="",
        new_generated_description="",
        comparison=reason,
        refined_prompt=current_prompt,
    )


def run_optimization(
    config: OptimizationConfig,
    reference_video: VideoFrames,
    initial_prompt: str,
    image: Optional[bytes] = None,
    generator_client: Optional[GeneratorClient] = None,
    vlm_client: Optional[VlmClient] = None,
) -> OptimizationResult:
    """Execute the full loop; see the module docstring for the shape of it.

    `image` is PNG bytes for image-to-video runs.  Clients may be
    injected for testing; by default they follow the config.
    """
    if not initial_prompt:
        raise ValueError("initial_prompt must be non-empty")
    if config.mode == MODE_IMAGE_TO_VIDEO and image is None:
        raise ValueError("image-to-video runs need a conditioning image")
    if config.mode == MODE_TEXT_TO_VIDEO and image is not None:
        raise ValueError("text-to-video runs take no conditioning image")

    if generator_client is None or vlm_client is None:
        default_generator, default_vlm = build_clients(config)
        generator_client = generator_client or default_generator
        vlm_client = vlm_client or default_vlm
    generator_client.frame_rate = reference_video.fps

    reference = dataclasses.replace(reference_video, label="A")
    reference_latent = video_to_latent(reference, config.channels)
    shape = reference_latent.shape

    condition = Condition(prompt=config.inversion_condition or initial_prompt)
    inversion_field = _inversion_field(config)
    inverted_noise = invert(inversion_field, reference_latent, condition, config.integrator)
    temporal_prior = (
        enhance_noise(inverted_noise, config.thresholds) if config.noise_enhance else None
    )
    reference_curve = measure_effect_curve(reference_latent)

    image_b64 = base64.b64encode(image).decode("ascii") if image is not None else None
    trajectory = Trajectory(max_length=config.i_max)
    iterations: list = []
    current_prompt = initial_prompt
    last_prompt: Optional[str] = None
    previous_video: Optional[VideoFrames] = None

    for i in range(config.i_max):
        fresh_noise = gaussian_noise(shape, config.base_seed + i)
        if config.noise_enhance:
            sampling_noise = blend(temporal_prior, fresh_noise, config.alpha.alpha)
        else:
            sampling_noise = fresh_noise

        request = GeneratorRequest(
            prompt=current_prompt,
            frames=shape.f,
            height=shape.h,
            width=shape.w,
            noise_b64=encode_tensor_b64(sampling_noise),
            image_b64=image_b64,
        )
        generated = generator_client.generate(request)
        video = generated.video or latent_to_video(generated.latent, reference.fps)
        video = dataclasses.replace(video, label="C")

        context_previous = previous_video if config.visual_context else None
        context = select_visual_context(reference, video, context_previous)
        sources = ["reference"]
        if context_previous is not None:
            sources.append(f"iter_{i - 1:03d}/frames")
        sources.append(f"iter_{i:03d}/frames")
        composite = vstack_videos(context)
        composite_info = composite_manifest(context, sources=sources)
        video_b64 = base64.b64encode(pack_video_zip(composite, composite_info)).decode("ascii")

        state = PromptState(
            subject=config.subject,
            environment=config.environment,
            desired_effect=config.desired_effect,
            current_prompt=current_prompt,
            last_prompt=last_prompt,
        )
        has_previous = context_previous is not None
        instruction = build_instruction(
            state,
            memory_digest(trajectory),
            has_previous=has_previous,
            include_memory=config.logic_context,
        )

        analysis = None
        attempts = 0
        failure = None
        while attempts < 1 + config.vlm_retry_cap:
            attempts += 1
            reply = vlm_client.refine(VlmRequest(instruction=instruction, video_b64=video_b64))
            try:
                analysis = parse_vlm_response(reply.text, has_previous=has_previous)
                break
            except VlmParseError as exc:
                failure = exc
        if analysis is None:
            analysis = _placeholder_analysis(
                current_prompt, f"no valid reply after {attempts} attempts: {failure}"
            )
            accepted = False
            next_prompt = current_prompt
        else:
            check = enforce_content_constraints(state, analysis.refined_prompt)
            accepted = check.accepted
            next_prompt = check.prompt

        update_history(
            trajectory,
            prompt=current_prompt,
            analysis=analysis,
            video_ref=f"iter_{i:03d}/frames",
            accepted=accepted,
        )

        discrepancy = None
        if config.simulate:
            generated_curve = measure_effect_curve(generated.latent)
            if len(generated_curve) == len(reference_curve):
                discrepancy = float(np.max(np.abs(reference_curve - generated_curve)))

        iterations.append(
            IterationOutput(
                index=i,
                prompt=current_prompt,
                refined_prompt=next_prompt,
                accepted=accepted,
                analysis=analysis,
                vlm_attempts=attempts,
                noise=sampling_noise,
                latent=generated.latent,
                video=video,
                composite=composite,
                composite_info=composite_info,
                discrepancy=discrepancy,
            )
        )

        last_prompt = current_prompt
        current_prompt = next_prompt
        if config.visual_context:
            previous_video = dataclasses.replace(video, label="B")

    return OptimizationResult(
        config=config,
        final_prompt=current_prompt,
        trajectory=trajectory,
        iterations=iterations,
        reference=reference,
        inverted_noise=inverted_noise,
        temporal_prior=temporal_prior,
    )


def synthesize_reference(
    config: OptimizationConfig,
    intensity: float = 0.8,
    onset: float = 0.0,
    speed: str = "slow",
) -> VideoFrames:
    """Build a reference clip with the simulated generator (simulate mode)."""
    params = GeneratorSimParams(channels=config.channels)
    backend = SimulatedGenerator(params)
    client = GeneratorClient(backend, retries=0, frame_rate=params.fps)
    prompt = (
        f"reference effect intensity={intensity} onset={onset} speed={speed}"
    )
    request = GeneratorRequest(
        prompt=prompt,
        frames=config.frames,
        height=config.height,
        width=config.width,
        seed=config.base_seed + 999983,
    )
    result = client.generate(request)
    video = result.video or latent_to_video(result.latent, params.fps)
    return dataclasses.replace(video, label="A")


def _iteration_dir(index: int) -> str:
    return f"iter_{index:03d}"


def persist_trajectory(result: OptimizationResult, directory: str) -> str:
    """Write the full run tree; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    save_frames(result.reference, os.path.join(directory, "reference"))
    save_tensor(result.inverted_noise, os.path.join(directory, "inverted_noise.npy"))
    files = {"reference": "reference", "inverted_noise": "inverted_noise.npy"}
    if result.temporal_prior is not None:
        save_tensor(result.temporal_prior, os.path.join(directory, "temporal_prior.npy"))
        files["temporal_prior"] = "temporal_prior.npy"

    entries = []
    for output, entry in zip(result.iterations, result.trajectory.entries):
        sub = _iteration_dir(output.index)
        base = os.path.join(directory, sub)
        os.makedirs(base, exist_ok=True)
        save_tensor(output.noise, os.path.join(base, "sampling_noise.npy"))
        save_tensor(output.latent, os.path.join(base, "latent.npy"))
        save_frames(output.video, os.path.join(base, "frames"))
        save_frames(output.composite, os.path.join(base, "composite"), manifest=output.composite_info)
        entries.append(
            {
                "index": output.index,
                "prompt": output.prompt,
                "refined_prompt": output.refined_prompt,
                "accepted": output.accepted,
                "analysis": output.analysis.to_dict(),
                "vlm_attempts": output.vlm_attempts,
                "video_ref": entry.video_ref,
                "discrepancy": output.discrepancy,
                "composite_segments": len(output.composite_info["segments"]),
                "files": {
                    "noise": f"{sub}/sampling_noise.npy",
                    "latent": f"{sub}/latent.npy",
                    "frames": f"{sub}/frames",
                    "composite": f"{sub}/composite",
                },
            }
        )

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": result.config.to_dict(),
        "final_prompt": result.final_prompt,
        "files": files,
        "iterations": entries,
    }
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_trajectory(directory: str) -> OptimizationResult:
    """Rebuild a persisted run; every referenced file must exist."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise TrajectoryIOError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TrajectoryIOError(f"unparseable manifest {manifest_path}: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"manifest schema {version!r}, supported: {SCHEMA_VERSION}")

    def _resolve(rel: str) -> str:
        path = os.path.join(directory, rel)
        if not os.path.exists(path):
            raise TrajectoryIOError(f"missing artifact: {path}")
        return path

    config = OptimizationConfig.from_dict(manifest["config"])
    reference, _ = load_frames(_resolve(manifest["files"]["reference"]))
    inverted_noise = load_tensor(_resolve(manifest["files"]["inverted_noise"]))
    temporal_prior = None
    if "temporal_prior" in manifest["files"]:
        temporal_prior = load_tensor(_resolve(manifest["files"]["temporal_prior"]))

    trajectory = Trajectory(max_length=config.i_max)
    iterations = []
    for item in manifest["iterations"]:
        analysis = VlmAnalysis.from_dict(item["analysis"])
        video, _ = load_frames(_resolve(item["files"]["frames"]))
        composite, composite_info = load_frames(_resolve(item["files"]["composite"]))
        iterations.append(
            IterationOutput(
                index=item["index"],
                prompt=item["prompt"],
                refined_prompt=item["refined_prompt"],
                accepted=item["accepted"],
                analysis=analysis,
                vlm_attempts=item["vlm_attempts"],
                noise=load_tensor(_resolve(item["files"]["noise"])),
                latent=load_tensor(_resolve(item["files"]["latent"])),
                video=video,
                composite=composite,
                composite_info=composite_info,
                discrepancy=item["discrepancy"],
            )
        )
        update_history(
            trajectory,
            prompt=item["prompt"],
            analysis=analysis,
            video_ref=item["video_ref"],
            accepted=item["accepted"],
        )

    return OptimizationResult(
        config=config,
        final_prompt=manifest["final_prompt"],
        trajectory=trajectory,
        iterations=iterations,
        reference=reference,
        inverted_noise=inverted_noise,
        temporal_prior=temporal_prior,
    )
