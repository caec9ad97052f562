"""Diffusion-based ambiguous image segmentation.

Instead of predicting one mask per image, the model learns the
*distribution* of plausible masks implied by disagreeing annotators: a
conditional denoising-diffusion model generates stochastic segmentations,
a pair of latent-Gaussian encoders regularizes the diversity of its
predictions toward the diversity of the annotations, and set-level
metrics (generalized energy distance, combined sensitivity / max-Dice /
diversity-agreement) score distributions against distributions.

See the subpackages: ``schedule`` (diffusion math), ``denoiser``,
``ambiguity``, ``objectives``, ``sampler``, ``metrics``, ``data``,
``harness`` (training/ablation/evaluation), ``plotting``, ``cli``.
"""

from .ambiguity import (
    AmbiguityNet,
    AmbiguityNetConfig,
    LatentGaussian,
    acn_forward,
    amn_forward,
    build_covariance,
    kl_divergence,
    make_acn,
    make_amn,
    reparam_sample,
)
from .checkpoint import Checkpoint, checkpoint_hash, load_checkpoint, save_checkpoint
from .data import (
    AmbiguousSample,
    SynthConfig,
    dataset_statistics,
    generate_synthetic,
    load_dataset,
    rater_view,
    save_dataset,
)
from .denoiser import Denoiser, DenoiserConfig, DenoiserOutput, denoise_forward, interpolate_variance
from .harness import (
    TrainConfig,
    TrainResult,
    blank_mask_fraction,
    evaluate,
    evaluate_with_sampler,
    run_ablation,
    train,
)
from .metrics import (
    CIReport,
    EvaluationSummary,
    MaskSet,
    ci_score,
    combined_sensitivity,
    dice,
    diversity_agreement,
    evaluate_testset,
    ged,
    iou,
    max_dice_match,
)
from .objectives import LossParts, LossReport, LossWeights, l_amb, l_prior_bits, l_simple, l_vlb_term, total_loss
from .sampler import SampleRequest, sample_masks, sample_trajectory
from .schedule import (
    NoiseSchedule,
    PosteriorParams,
    make_linear_schedule,
    posterior_params,
    predict_x0_from_eps,
    q_sample,
)

__version__ = "0.1.0"
