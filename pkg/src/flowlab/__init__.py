"""Desk-scale conditional flow-matching lab.

Trains small velocity fields on 2-D toy distributions, samples them under
pluggable guidance strategies, and numerically verifies the stability
properties of the predictor-corrector guidance rule.
"""

from .datasets import (
    Checkerboard,
    GaussianMixture,
    GaussianSingle,
    OracleVelocityField,
    TwoMoons,
    interpolate,
    oracle_marginal,
    oracle_velocity,
    sample_pair,
    target_velocity,
)
from .guidance import (
    Apg,
    Cfg,
    CfgZeroStar,
    NoGuidance,
    RectCfgPP,
    alpha_schedule,
    nfe_per_step,
)
from .model import MlpVelocityField, TrainMeta, load_model, save_model
from .numerics import RngStream, dot, l2_norm, sample_standard_normal
from .sampler import SamplerConfig, Trajectory, conditional_reference_step, ode_update, sample
from .training import TrainConfig, TrainReport, adam_step, cfm_loss, train
from .verify import (
    BoundEstimates,
    energy_distance,
    manifold_distance,
    sliced_wasserstein,
)

__version__ = "0.1.0"
