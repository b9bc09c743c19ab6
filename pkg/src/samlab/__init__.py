"""samlab: a laboratory for mini-batch sharpness-aware optimization.

Loss ensembles (quadratic and tiny-MLP), SAM-style search directions
with an orthogonal-residual correction, increasing-batch and decaying-LR
schedules, gradient-noise diagnostics, theoretical noise bounds and
admissible step-size windows, and a reproducible run harness with CSV,
JSON, and figure reports.
"""

from .diagnostics import (GradBoundEstimates, NoiseSample, SharpnessSpec,
                          adaptive_sharpness, default_cadence, grad_bound_update,
                          mc_noise_norm, noise_sample)
from .ensemble import (BatchSampler, LossEnsemble, MiniBatch, QuadraticEnsemble,
                       TinyMlpEnsemble, empirical_sigma_sq, exact_sigma_sq,
                       finite_difference_gradient, full_gradient, glorot_init,
                       make_tiny_mlp_ensemble, minibatch_gradient, random_quadratic)
from .harness import (CSV_COLUMNS, ConfigError, DivergenceError, RunAggregate,
                      RunConfig, RunTrace, StepRecord, aggregate_runs, build_ensemble,
                      config_from_dict, config_hash, export, initial_point, load_config,
                      rank_sweep, run, run_many, summarize, sweep)
from .rng import derive_int, stream, substream
from .sam import (AdamState, Decomposition, SamConfig, config_with, decompose,
                  direction, direction_parts, perturbation, sam_gradient, step)
from .schedules import (BatchSchedule, ConstantLr, CosineLr, LinearLr, LrSchedule,
                        ScheduleAggregates, ScheduleAlgebraError, WarmupLr, aggregates,
                        batch_at, lr_at, lr_sums, total_steps)
from .theory import (SCHEDULERS, THEOREM2_CASES, ProblemConstants, ScalingFit,
                     admissible_eta_window, convergence_verdict,
                     quadratic_branch_indicator, rho_window, scaling_fit,
                     schedule_summary_thresholds, theorem1_upper_bound,
                     theorem2_lower_bound)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
