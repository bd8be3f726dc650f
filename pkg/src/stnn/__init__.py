"""Latent spatio-temporal forecasting toolkit.

Per-series latent factors with relational dynamics on a graph prior, a
linear decoder, Nesterov-momentum training, closed-loop multi-horizon
inference, relation discovery through L1-sparsified weights, and a
rolling-origin evaluation harness with Mean and AR baselines.
"""

from .data import (NormalizationRecord, Relation, RelationSet, SeriesTensor,
                   SyntheticSpec, build_powers, denormalize, generate_synthetic,
                   load_relations, load_series, normalize, save_relations,
                   save_series)
from .evaluation import (ArConfig, ArModel, FoldPlan, MeanModel, PlanningError,
                         ScoreReport, StnnModel, ar_fit_predict, evaluate,
                         forecast, grid_search, mean_baseline, plan_folds,
                         ranking_auc, rmse)
from .model import (Checkpoint, DynamicGateParams, GradientSet, LatentState,
                    LossBreakdown, ModelVariant, StateError, StnnParameters,
                    decode, dynamic_gate, dynamics_step, extract_correlations,
                    gradients, init_model, load_checkpoint, loss,
                    save_checkpoint)
from .numerics import ShapeError, derive_seed, hadamard, map_tanh, matmul, substream
from .training import (DivergenceError, OptimizerState, TraceEntry,
                       TrainingConfig, grad_check, nag_step, sample_pairs,
                       train)

__version__ = "0.1.0"
