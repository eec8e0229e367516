"""Prompt-guided adversarial patch toolkit.

Optimizes the seed latent of a deterministic diffusion sampler so the decoded
patch suppresses detector confidence on annotated person boxes while two
alignment losses keep the patch consistent with a textual environment prompt.
Includes expectation-over-transformation augmentation, differentiable patch
placement, synthetic white-box detectors, and mAP@50 / frame-ASR evaluation.
"""

from .attack import (
    AdversarialPatch,
    EOTConfig,
    TransformParams,
    apply_transform,
    attack_loss,
    place_patch,
    placement_region,
    sample_transform,
)
from .conditioning import AttentionWeights, cross_attention, embed_prompt
from .config import DEFAULT_PROMPT, RunConfig, load_config, save_config
from .data import (
    AnnotationRecord,
    load_dataset,
    load_image,
    parse_annotations,
    save_annotations,
    synthesize_dataset,
)
from .detectors import (
    AnalyticColorDetector,
    ConvScoreDetector,
    Detection,
    DetectionSet,
    SubprocessDetector,
)
from .errors import ConfigError, DataError, NumericalError
from .losses import (
    LossWeights,
    RunAnchors,
    latent_alignment_loss,
    prompt_alignment_loss,
    total_loss,
)
from .metrics import asr, frame_outcome, iou, likert_summary, map50, mean_asr
from .nets import ConvDecoder, ConvDenoiser
from .optimizer import (
    AdamState,
    AnnotatedImage,
    EpochRecord,
    OptimizerConfig,
    PatchPipeline,
    RunState,
    adam_step,
    build_pipeline,
    evaluate_losses,
    initialize_run,
    optimize,
)
from .sampler import (
    AttentionRecord,
    DiffusionTrace,
    LatentState,
    SamplerConfig,
    cfg_combine,
    ddim_step,
    ddpm_step,
    sample,
)
from .schedule import NoiseSchedule, build_schedule

__version__ = "0.1.0"
