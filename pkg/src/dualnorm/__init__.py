"""dualnorm: normalization strategies for hybrid adversarial training."""
# ruff: noqa: F401  -- this module re-exports the public API

from .attacks import AttackConfig, pgd, uniform_noise
from .kernels import BACKEND
from .losses import hybrid_loss, kl_regularizer
from .models import Architecture, build_model, input_gradient
from .normcore import (AffineParams, BranchTag, NormConfig, NormKind,
                       NormLayerState, NormMode, NormStats, normalize_forward,
                       select_params, update_running)
from .probe import (GapReport, StatsSnapshot, export_channels, gap_report,
                    recalibrate, recombine_eval, wasserstein_1d)
from .train import (Deployment, OptimConfig, RegimeConfig, evaluate,
                    train_loop, train_step)

__version__ = "0.1.0"
