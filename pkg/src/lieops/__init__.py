"""Lie group operator dictionaries for manifold-aware representation learning.

The package learns dictionaries of matrix-exponential generators that
transport features along a data manifold, infers sparse transport
coefficients either exactly (FISTA) or through an amortized variational
sampler, and plugs the resulting generative manifold model into contrastive
pretraining and semi-supervised consistency training at desk scale.
"""

from .expm import expm, expm_frechet, expm_vjp
from .errors import ConfigError, DivergenceError, StaleCacheError
from .operators import (
    InitConfig,
    OperatorDictionary,
    distance_improvement,
    frobenius_penalty,
    grad_clip_and_step,
    init_dictionary,
    load_dictionary,
    manifold_loss,
    save_dictionary,
    transport,
)
from .inference import (
    BestOfMany,
    LaplacianParams,
    StepSizePolicy,
    VariationalConfig,
    best_of_many,
    fista_infer,
    kl_laplacian,
    sample_laplacian,
    soft_threshold_st,
)
from .networks import (
    AdamWState,
    EmaState,
    MlpNet,
    WarmupSchedule,
    adamw_update,
    ema_update,
    encode_posterior,
    encode_prior,
    load_mlp,
    save_mlp,
)
from .contrastive import (
    ContrastiveConfig,
    ManifoldClrConfig,
    OperatorTrainConfig,
    ProbeConfig,
    TrainConfig,
    info_nce,
    linear_probe,
    manifoldclr_step,
    train_lie_operators,
    train_manifoldclr,
)
from .semisup import PriorSampler, SemiSupConfig, run_semisup_trial, semisup_loss
from .datasets import (
    PointPairBatch,
    SynthClassDataset,
    neighbor_pairs,
    swiss_roll,
    synth_class_manifolds,
)
from .metrics import MetricsRecord, effective_rank, emit, operator_paths

__version__ = "0.1.0"
