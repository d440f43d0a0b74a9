"""Point-supervised subject selection and subject-driven generation.

Pipeline: two clicked points on a reference image select the wanted subject
and mask out its distractor, the masked region is inpainted away, the clean
subject latent is fused with image-encoder context and injected into a
frozen diffusion denoiser through a small trainable copy whose influence
follows a timestep weight schedule.  Training touches only the copy, the
fusion weights and (optionally) a learned schedule net.
"""

from .backbone import (
    BackboneBundle,
    DiffusionSchedule,
    ToyBackboneConfig,
    build_backbone,
)
from .errors import P3SError
from .evaluation import (
    EvalProtocol,
    ScoreTable,
    image_similarity,
    load_prompts,
    run_benchmark,
    text_alignment,
)
from .fusion import LatentFusion, SubjectInput, build_subject_input
from .injection import (
    InjectionConfig,
    WeightSchedule,
    denoise_joint,
    init_trainable_copy,
    schedule_weight,
)
from .losses import attention_consistency_loss, denoising_loss, total_loss
from .masking import (
    MaskConfig,
    PointAnnotation,
    extract_negative_mask,
    load_annotation,
    save_mask_artifacts,
)
from .sampling import GenerationResult, SampleRequest, generate, generate_baseline
from .training import TrainConfig, fine_tune, load_checkpoint, prepare_training_set

__version__ = "0.1.0"

__all__ = [
    "BackboneBundle",
    "DiffusionSchedule",
    "EvalProtocol",
    "GenerationResult",
    "InjectionConfig",
    "LatentFusion",
    "MaskConfig",
    "P3SError",
    "PointAnnotation",
    "SampleRequest",
    "ScoreTable",
    "SubjectInput",
    "ToyBackboneConfig",
    "TrainConfig",
    "WeightSchedule",
    "attention_consistency_loss",
    "build_backbone",
    "build_subject_input",
    "denoise_joint",
    "denoising_loss",
    "extract_negative_mask",
    "fine_tune",
    "generate",
    "generate_baseline",
    "image_similarity",
    "init_trainable_copy",
    "load_annotation",
    "load_checkpoint",
    "load_prompts",
    "prepare_training_set",
    "run_benchmark",
    "save_mask_artifacts",
    "schedule_weight",
    "text_alignment",
    "total_loss",
    "__version__",
]
