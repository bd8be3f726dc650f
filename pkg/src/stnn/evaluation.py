"""Closed-loop forecasting, RMSE scoring, baselines, and the rolling-origin
evaluation harness.

A fold trains on a fixed-size window and scores the H steps immediately
after it. Normalization statistics are always fitted on the fold's training
window alone, so test values never leak into training. Scores are reported
in normalized units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .data import RelationSet, SeriesTensor, build_powers, normalize
from .model import LatentState, ModelVariant, StnnParameters, decode, dynamics_step
from .numerics import ShapeError, derive_seed
from .training import DivergenceError, TrainingConfig, train

__all__ = [
    "forecast",
    "rmse",
    "mean_baseline",
    "ArConfig",
    "ar_fit_predict",
    "FoldPlan",
    "PlanningError",
    "plan_folds",
    "MeanModel",
    "ArModel",
    "StnnModel",
    "ScoreReport",
    "evaluate",
    "grid_search",
    "write_report_csv",
    "write_report_json",
    "ranking_auc",
]


def forecast(z: LatentState, params: StnnParameters, relations: RelationSet,
             variant: ModelVariant, horizons: int) -> np.ndarray:
    """Closed-loop rollout: apply the dynamics ``horizons`` times from the
    final latent slice, decoding every intermediate step.

    Returns predictions of shape (horizons, n, m) for steps T+1..T+horizons.
    """
    if horizons < 1:
        raise ValueError(f"horizons must be >= 1, got {horizons}")
    zt = z.z[-1]
    out = np.empty((horizons, z.n, params.m))
    for h in range(horizons):
        zt = dynamics_step(zt, params, relations, variant)
        out[h] = decode(zt, params)
    return out


def rmse(pred: np.ndarray, truth: np.ndarray):
    """Per-horizon RMSE over all n*m entries, plus the mean over horizons."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} vs truth {truth.shape}")
    diff = (pred - truth).reshape(pred.shape[0], -1)
    per_horizon = np.sqrt(np.mean(diff * diff, axis=1))
    return per_horizon, float(per_horizon.mean())


def mean_baseline(train_window: SeriesTensor, horizons: int) -> np.ndarray:
    """Every (series, dimension) predicts its training-window mean."""
    means = train_window.values.mean(axis=0)
    return np.broadcast_to(means, (horizons,) + means.shape).copy()


@dataclass
class ArConfig:
    """Scalar autoregression config: number of past lags and intercept flag."""

    lag: int = 5
    intercept: bool = True

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("lag must be >= 1")


def ar_fit_predict(train_window: SeriesTensor, cfg: ArConfig, horizons: int) -> np.ndarray:
    """Per-(series, dimension) least-squares autoregression, rolled forward.

    Coefficients solve the normal equations with a 1e-8 ridge on the diagonal
    as a degeneracy guard; multi-horizon forecasts apply the fitted map
    recursively to its own outputs.
    """
    values = train_window.values
    T, n, m = values.shape
    R = cfg.lag
    if T <= R + 1:
        raise ValueError(f"training window of {T} steps too short for lag {R}")
    preds = np.empty((horizons, n, m))
    cols = R + (1 if cfg.intercept else 0)
    for i in range(n):
        for j in range(m):
            series = values[:, i, j]
            rows = T - R
            design = np.empty((rows, cols))
            for k in range(R):
                design[:, k] = series[R - 1 - k : T - 1 - k]
            if cfg.intercept:
                design[:, R] = 1.0
            target = series[R:]
            gram = design.T @ design + 1e-8 * np.eye(cols)
            beta = np.linalg.solve(gram, design.T @ target)
            history = series[-R:][::-1].copy()  # most recent lag first
            for h in range(horizons):
                nxt = float(history[:R] @ beta[:R]) + (float(beta[R]) if cfg.intercept else 0.0)
                preds[h, i, j] = nxt
                history = np.concatenate(([nxt], history[:-1]))
    return preds


class PlanningError(ValueError):
    """A requested fold layout does not fit the series; carries the maximum
    feasible fold count."""

    def __init__(self, message: str, max_feasible: int):
        super().__init__(f"{message} (maximum feasible folds: {max_feasible})")
        self.max_feasible = max_feasible


@dataclass
class FoldPlan:
    """Rolling-origin layout: folds are (train_start, train_end, test_end),
    0-based half-open, train_end - train_start == train_window and
    test_end - train_end == horizon."""

    length: int
    train_window: int
    horizon: int
    fold_count: int
    stride: int
    folds: list[tuple[int, int, int]]


def plan_folds(length: int, train_window: int, horizon: int, folds: int) -> FoldPlan:
    """Evenly spread ``folds`` training windows over the series.

    The stride is floor((L - T' - H) / (F - 1)) for F > 1 and 0 for F = 1;
    an infeasible request raises :class:`PlanningError` naming the maximum
    feasible fold count.
    """
    if folds < 1:
        raise ValueError("fold count must be >= 1")
    if train_window < 2 or horizon < 1:
        raise ValueError("train_window must be >= 2 and horizon >= 1")
    slack = length - train_window - horizon
    if slack < 0:
        raise PlanningError(
            f"series of length {length} cannot fit train_window={train_window} "
            f"+ horizon={horizon}", max_feasible=0)
    if folds == 1:
        stride = 0
    else:
        stride = slack // (folds - 1)
        if stride == 0:
            raise PlanningError(
                f"{folds} folds need distinct start offsets but only {slack + 1} fit",
                max_feasible=slack + 1)
    triples = []
    for f in range(folds):
        start = f * stride
        triples.append((start, start + train_window, start + train_window + horizon))
    return FoldPlan(length, train_window, horizon, folds, stride, triples)


@dataclass
class MeanModel:
    name: str = "mean"


@dataclass
class ArModel:
    name: str = "ar"
    config: ArConfig = field(default_factory=ArConfig)


@dataclass
class StnnModel:
    """A learned-model entry for the evaluation harness.

    ``powers`` builds relation powers W^(1)..W^(K) from the (single) base
    prior; ``num_relations`` sizes the placeholder set when the discovery
    variant runs without any prior.
    """

    name: str = "stnn"
    latent_dim: int = 10
    training: TrainingConfig = field(default_factory=TrainingConfig)
    powers: int | None = None
    num_relations: int = 1


def model_relations(relations: RelationSet | None, spec: StnnModel, n: int) -> RelationSet:
    """Resolve the relation set a learned model actually trains with."""
    if spec.powers is not None:
        if relations is None or len(relations) != 1:
            raise ValueError("relation powers require exactly one base relation")
        return build_powers(relations.matrices()[0], spec.powers)
    if relations is None or len(relations) == 0:
        if spec.training.variant is ModelVariant.STNN_D:
            return RelationSet.placeholder(n, spec.num_relations)
        return RelationSet(n, [])
    return relations.normalized()


@dataclass
class ScoreReport:
    """RMSE per (model, seed, fold, horizon) with aggregation helpers."""

    model_names: list[str]
    seeds: list[int]
    plan: FoldPlan
    cells: np.ndarray  # (models, seeds, folds, horizons); NaN marks failure
    forecasts: dict | None = None  # (model, seed, fold) -> (H, n, m), optional

    def per_horizon(self, name: str) -> np.ndarray:
        idx = self.model_names.index(name)
        return np.nanmean(self.cells[idx], axis=(0, 1))

    def overall_per_seed(self, name: str) -> np.ndarray:
        idx = self.model_names.index(name)
        return np.nanmean(self.cells[idx], axis=(1, 2))

    def overall(self, name: str) -> float:
        return float(np.nanmean(self.overall_per_seed(name)))

    def std_across_seeds(self, name: str) -> float | None:
        if len(self.seeds) < 2:
            return None
        return float(np.nanstd(self.overall_per_seed(name)))

    def summary(self) -> dict:
        out = {}
        for name in self.model_names:
            per_h = [_json_float(v) for v in self.per_horizon(name)]
            out[name] = {
                "mean_rmse": _json_float(self.overall(name)),
                "per_horizon": per_h,
                "std_across_seeds": self.std_across_seeds(name),
            }
        return out

    def rows(self):
        """CSV rows (model, fold, horizon, rmse); cells averaged over seeds."""
        mean_cells = np.nanmean(self.cells, axis=1)  # (models, folds, horizons)
        for mi, name in enumerate(self.model_names):
            for f in range(self.plan.fold_count):
                for h in range(self.plan.horizon):
                    yield name, f, h + 1, float(mean_cells[mi, f, h])


def _json_float(v: float):
    return None if (v != v) else float(v)  # NaN -> null


def evaluate(x: SeriesTensor, relations: RelationSet | None, plan: FoldPlan,
             models: list, seeds: list[int] | None = None,
             keep_forecasts: bool = False) -> ScoreReport:
    """Rolling-origin evaluation of every model on every fold.

    Per fold: normalize on the fold's training window, train learned models
    from scratch (seed salted by fold index), forecast H steps, and score
    against the normalized test block. A diverging (model, fold) run only
    poisons that cell. ``seeds`` reruns learned models once per seed;
    baselines are deterministic and replicated across seeds.
    """
    if plan.folds[-1][2] > x.T:
        raise ValueError(f"fold plan needs {plan.folds[-1][2]} steps, series has {x.T}")
    seed_list = list(seeds) if seeds else [None]
    names = [spec.name for spec in models]
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    cells = np.full((len(models), len(seed_list), plan.fold_count, plan.horizon), np.nan)
    forecasts = {} if keep_forecasts else None

    for fi, (fs, fe, te) in enumerate(plan.folds):
        train_slice, record = normalize(x.window(fs, fe))
        test_block = record.apply(x.values[fe:te])
        for mi, spec in enumerate(models):
            for si, seed in enumerate(seed_list):
                if isinstance(spec, MeanModel):
                    preds = mean_baseline(train_slice, plan.horizon)
                elif isinstance(spec, ArModel):
                    preds = ar_fit_predict(train_slice, spec.config, plan.horizon)
                else:
                    base_seed = spec.training.seed if seed is None else seed
                    cfg = replace(spec.training, seed=derive_seed(base_seed, "fold", fi))
                    rels = model_relations(relations, spec, x.n)
                    try:
                        z, params, _ = train(train_slice, rels, cfg, spec.latent_dim)
                        preds = forecast(z, params, rels, cfg.variant, plan.horizon)
                    except DivergenceError:
                        continue
                per_h, _ = rmse(preds, test_block)
                cells[mi, si, fi] = per_h
                if keep_forecasts:
                    forecasts[(spec.name, si, fi)] = preds
    return ScoreReport(names, [s for s in seed_list if s is not None], plan, cells, forecasts)


def write_report_csv(report: ScoreReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model,fold,horizon,rmse\n")
        for name, fold, horizon, value in report.rows():
            fh.write(f"{name},{fold},{horizon},{repr(value)}\n")


def write_report_json(report: ScoreReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=1)
        fh.write("\n")


GRID_KEYS = ("latent_dim", "lambda", "gamma", "powers")


def grid_search(x: SeriesTensor, relations: RelationSet | None, plan: FoldPlan,
                base: StnnModel, grids: dict):
    """Exhaustive sweep over the hyperparameter grids.

    ``grids`` may hold lists under 'latent_dim', 'lambda', 'gamma', 'powers';
    missing keys fall back to the base model's single value. Returns the best
    configuration (lowest overall RMSE; ties broken by smaller latent_dim,
    then lambda, then gamma, then powers) and the full response-surface rows.
    """
    axes = {
        "latent_dim": sorted(grids.get("latent_dim", [base.latent_dim])),
        "lambda": sorted(grids.get("lambda", [base.training.lam])),
        "gamma": sorted(grids.get("gamma", [base.training.gamma])),
        "powers": sorted(grids.get("powers", [base.powers]), key=lambda v: (v is not None, v)),
    }
    for key, values in axes.items():
        if not values:
            raise ValueError(f"grid for '{key}' is empty")
    rows = []
    best = None
    best_score = math.inf
    for N, lam, gamma, powers in product(axes["latent_dim"], axes["lambda"],
                                         axes["gamma"], axes["powers"]):
        spec = replace(base, latent_dim=N, powers=powers,
                       training=replace(base.training, lam=lam, gamma=gamma))
        report = evaluate(x, relations, plan, [spec])
        score = report.overall(spec.name)
        rows.append({"latent_dim": N, "lambda": lam, "gamma": gamma,
                     "powers": powers, "rmse": score})
        if score == score and score < best_score:  # skip NaN
            best_score = score
            best = spec
    if best is None:
        raise RuntimeError("every grid point failed; no best configuration")
    return best, rows


def write_grid_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("latent_dim,lambda,gamma,powers,rmse\n")
        for row in rows:
            powers = "" if row["powers"] is None else row["powers"]
            fh.write(f"{row['latent_dim']},{repr(float(row['lambda']))},"
                     f"{repr(float(row['gamma']))},{powers},{repr(float(row['rmse']))}\n")


def ranking_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve of ``scores`` against binary ``labels``,
    computed from the rank-sum with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores shape {scores.shape} vs labels {labels.shape}")
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))
