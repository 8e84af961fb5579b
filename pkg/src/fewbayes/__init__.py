"""Amortized Bayesian few-shot classification with annealed regularization.

A desk-scale toolkit: a minimal reverse-mode tensor engine, an episodic
few-shot model with Gaussian weight posteriors, KL/MMD regularizers with
cyclical beta annealing, and a trainer with collapse diagnostics.
"""

from .autodiff import Tensor, apply_primitive, backward, finite_diff_check, no_grad
from .config import TrainConfig, load_train_config
from .divergences import KernelConfig, gaussian_kl, median_heuristic, mmd2, rbf_kernel
from .episodes import (
    Dataset,
    Episode,
    generate_synthetic_dataset,
    load_dataset,
    sample_episode,
    write_dataset,
)
from .model import (
    GaussianPosterior,
    ModelParams,
    aggregate_context,
    amortize,
    decode_logits,
    encode,
    init_model,
    load_checkpoint,
    pool_prototype,
    sample_weights,
    save_checkpoint,
)
from .objectives import LossBreakdown, nll_loss, predictive_log_prob, regularizer, total_loss
from .schedules import ScheduleConfig, beta_at
from .trainer import (
    AdamState,
    CollapseReport,
    EvalReport,
    adam_step,
    build_dataset,
    collapse_diagnostics,
    evaluate,
    train,
)

__version__ = "0.1.0"
