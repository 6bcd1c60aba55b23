"""Transfer a reference video's dynamic visual effect to new scenes.

The pipeline is training-free: it inverts the reference clip into
sampling noise, filters that noise into a motion-preserving temporal
prior via two SVD projections, and then iteratively refines the text
prompt with a vision-language model that compares each new generation
against the reference.
"""

from .flow import (
    Condition,
    DivergenceError,
    IntegratorConfig,
    VelocityField,
    integrate_forward,
    invert,
    make_toy_field,
)
from .gateway import (
    GatewayError,
    GeneratorClient,
    GeneratorRequest,
    GeneratorResponse,
    VlmClient,
    VlmRequest,
    VlmResponse,
)
from .media import VideoFrames, resample_fps, resize_bilinear, vstack_videos
from .noise_prior import (
    BlendWeight,
    DegenerateSpectrumError,
    ProjectionThresholds,
    blend,
    enhance_noise,
    retain_temporal,
    select_rank_removed,
    select_rank_retained,
    suppress_spatial,
)
from .orchestrator import (
    OptimizationConfig,
    OptimizationResult,
    load_trajectory,
    persist_trajectory,
    run_optimization,
)
from .prompting import (
    PromptState,
    Trajectory,
    VlmAnalysis,
    build_instruction,
    enforce_content_constraints,
    memory_digest,
    parse_vlm_response,
    update_history,
)
from .tensors import LatentTensor, TensorShape, gaussian_noise, load_tensor, save_tensor, tensor_stats

__version__ = "0.1.0"

__all__ = [
    "BlendWeight",
    "Condition",
    "DegenerateSpectrumError",
    "DivergenceError",
    "GatewayError",
    "GeneratorClient",
    "GeneratorRequest",
    "GeneratorResponse",
    "IntegratorConfig",
    "LatentTensor",
    "OptimizationConfig",
    "OptimizationResult",
    "ProjectionThresholds",
    "PromptState",
    "TensorShape",
    "Trajectory",
    "VelocityField",
    "VideoFrames",
    "VlmAnalysis",
    "VlmClient",
    "VlmRequest",
    "VlmResponse",
    "blend",
    "build_instruction",
    "enforce_content_constraints",
    "enhance_noise",
    "gaussian_noise",
    "integrate_forward",
    "invert",
    "load_tensor",
    "load_trajectory",
    "make_toy_field",
    "memory_digest",
    "parse_vlm_response",
    "persist_trajectory",
    "resample_fps",
    "resize_bilinear",
    "retain_temporal",
    "run_optimization",
    "save_tensor",
    "select_rank_removed",
    "select_rank_retained",
    "suppress_spatial",
    "tensor_stats",
    "update_history",
    "vstack_videos",
]
