"""Diffusion models for traffic-matrix tomography, completion and synthesis."""

from .data import (
    NormalizationParams,
    baseline_interpolate,
    build_random_mask,
    clip_and_normalize,
    denormalize,
    ingest_csv,
    link_loads,
    make_windows,
    shortest_path_routing,
    train_test_split,
)
from .denoiser import (
    DenoiserConfig,
    TrainConfig,
    TransformerDenoiser,
    denoise,
    denoise_input_gradient,
    load_params,
    save_params,
    train_denoiser,
    train_preprocessor,
)
from .diffusion import (
    NoiseSchedule,
    cosine_schedule,
    ddim_step,
    ddpm_step,
    forward_sample,
    masked_loss,
    x0_from_score,
)
from .errors import NumericalError, TMError, ValidationError
from .metrics import evaluate, mmd2, nmae, nrmse, tre
from .sampling import (
    GuidanceConfig,
    assemble_series,
    em_refine,
    replace_known,
    sample_completion,
    sample_tomography,
    sample_unconditional,
)

__version__ = "0.1.0"
