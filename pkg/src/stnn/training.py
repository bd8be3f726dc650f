"""Nesterov-accelerated stochastic training of latents and parameters.

Each iteration samples a mini-batch of (Z_t, Z_{t+1}) pairs uniformly with
replacement, evaluates gradients at the momentum look-ahead point, and
applies the velocity update

    v <- mu * v - lr * grad(block + mu * v)
    block <- block + v

to every learnable block (all latent slices, the transition maps, the
decoder, the relation weights, the gate). The per-iteration objective covers
reconstruction at both endpoints of every sampled pair, the dynamics error
at the pair itself, and the L1 penalty on the full Gamma blocks scaled by
B/(T-1) so its expected per-epoch weight matches the full objective.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import RelationSet, SeriesTensor
from .model import (GradientSet, LatentState, LossBreakdown, ModelVariant,
                    StnnParameters, DynamicGateParams, gradients, init_model, loss)
from .numerics import substream

__all__ = [
    "TrainingConfig",
    "OptimizerState",
    "TraceEntry",
    "DivergenceError",
    "sample_pairs",
    "nag_step",
    "train",
    "grad_check",
    "write_trace_csv",
]

TRACE_COLUMNS = ["epoch", "reconstruction", "dynamics", "l1", "total", "grad_norm", "seconds"]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, epoch: int, detail: str = ""):
        suffix = f" ({detail})" if detail else ""
        super().__init__(f"training diverged at epoch {epoch}{suffix}")
        self.epoch = epoch


@dataclass
class TrainingConfig:
    lam: float = 0.1
    gamma: float = 0.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_pairs: int = 32
    epochs: int = 500
    seed: int = 0
    variant: ModelVariant = ModelVariant.STNN
    clip_norm: float | None = None  # global gradient-norm clip, off by default

    def __post_init__(self):
        self.variant = ModelVariant(self.variant)
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_pairs < 1:
            raise ValueError("batch_pairs must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class OptimizerState:
    """One velocity buffer per learnable block, zero-initialized."""

    velocities: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, blocks: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in blocks.items()})


@dataclass
class TraceEntry:
    epoch: int
    loss: LossBreakdown
    grad_norm: float
    seconds: float


def sample_pairs(T: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``batch`` pair indices uniformly with replacement from [1, T-1]."""
    if T < 2:
        raise ValueError(f"need T >= 2 to form pairs, got T={T}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return rng.integers(1, T, size=batch)


def _blocks_of(z: LatentState, params: StnnParameters) -> dict[str, np.ndarray]:
    blocks = {"z": z.z, "theta0": params.theta0}
    for r, theta in enumerate(params.thetas):
        blocks[f"theta:{r}"] = theta
    blocks["decoder_w"] = params.decoder_weight
    blocks["decoder_b"] = params.decoder_bias
    if params.gammas is not None:
        for r, gm in enumerate(params.gammas):
            blocks[f"gamma:{r}"] = gm
    if params.gate is not None:
        blocks["gate_w"] = params.gate.weights
        blocks["gate_b"] = params.gate.biases
    return blocks


def _grad_blocks(g: GradientSet) -> dict[str, np.ndarray]:
    blocks = {"z": g.z, "theta0": g.theta0}
    for r, theta in enumerate(g.thetas):
        blocks[f"theta:{r}"] = theta
    blocks["decoder_w"] = g.decoder_weight
    blocks["decoder_b"] = g.decoder_bias
    if g.gammas is not None:
        for r, gm in enumerate(g.gammas):
            blocks[f"gamma:{r}"] = gm
    if g.gate_weights is not None:
        blocks["gate_w"] = g.gate_weights
        blocks["gate_b"] = g.gate_biases
    return blocks


def _rebuild(blocks: dict[str, np.ndarray], template: StnnParameters):
    count = template.relation_count
    params = StnnParameters(
        theta0=blocks["theta0"],
        thetas=[blocks[f"theta:{r}"] for r in range(count)],
        decoder_weight=blocks["decoder_w"],
        decoder_bias=blocks["decoder_b"],
        gammas=None if template.gammas is None else [blocks[f"gamma:{r}"] for r in range(count)],
        gate=None if template.gate is None else DynamicGateParams(blocks["gate_w"], blocks["gate_b"]),
    )
    return LatentState(blocks["z"]), params


def nag_step(blocks: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             opt: OptimizerState, learning_rate: float,
             momentum: float) -> dict[str, np.ndarray]:
    """Velocity update for every block; ``grads`` must already be evaluated
    at the look-ahead point block + momentum * velocity."""
    out = {}
    for key, block in blocks.items():
        v = momentum * opt.velocities[key] - learning_rate * grads[key]
        opt.velocities[key] = v
        out[key] = block + v
    return out


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def _check_finite(blocks: dict[str, np.ndarray], epoch: int) -> None:
    for key, block in blocks.items():
        if not np.isfinite(block).all():
            raise DivergenceError(epoch, f"non-finite values in block '{key}'")


def train(x: SeriesTensor, relations: RelationSet, cfg: TrainingConfig,
          latent_dim: int):
    """Fit latents and parameters on ``x``; returns (latents, params, trace).

    Runs epochs * ceil((T-1)/B) iterations. The trace holds one entry per
    completed epoch with the full-objective loss breakdown, the full-gradient
    norm, and the epoch wall-clock time. Raises :class:`DivergenceError` as
    soon as any block or the epoch loss turns non-finite.
    """
    if x.T < 2:
        raise ValueError(f"need at least 2 time steps to train, got T={x.T}")
    variant = cfg.variant
    init_rng = substream(cfg.seed, "init")
    pair_rng = substream(cfg.seed, "pairs")
    z0, params0 = init_model(x.n, x.m, latent_dim, relations, variant, x.T, init_rng)

    blocks = _blocks_of(z0, params0)
    opt = OptimizerState.zeros(blocks)
    iters_per_epoch = math.ceil((x.T - 1) / cfg.batch_pairs)
    l1_scale = cfg.batch_pairs / (x.T - 1)
    trace: list[TraceEntry] = []

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        # a diverging step floods later arithmetic with inf/nan; the finite
        # check below reports it, so suppress the interim warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(iters_per_epoch):
                ts = sample_pairs(x.T, cfg.batch_pairs, pair_rng)
                if cfg.momentum > 0.0:
                    shifted = {k: b + cfg.momentum * opt.velocities[k] for k, b in blocks.items()}
                else:
                    shifted = blocks
                sz, sp = _rebuild(shifted, params0)
                g = gradients(x, sz, sp, relations, variant, cfg.lam, cfg.gamma,
                              pairs=ts, l1_scale=l1_scale)
                gb = _grad_blocks(g)
                if cfg.clip_norm is not None:
                    gb = _clip(gb, cfg.clip_norm)
                blocks = nag_step(blocks, gb, opt, cfg.learning_rate, cfg.momentum)
                _check_finite(blocks, epoch)
            z, params = _rebuild(blocks, params0)
            breakdown = loss(x, z, params, relations, variant, cfg.lam, cfg.gamma)
            if not math.isfinite(breakdown.total):
                raise DivergenceError(epoch, "non-finite loss")
            grad_norm = gradients(x, z, params, relations, variant,
                                  cfg.lam, cfg.gamma).norm()
        trace.append(TraceEntry(epoch, breakdown, grad_norm,
                                time.perf_counter() - started))

    z, params = _rebuild(blocks, params0)
    return z, params, trace


def write_trace_csv(trace: list[TraceEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for entry in trace:
            fh.write(",".join([
                str(entry.epoch),
                repr(entry.loss.reconstruction),
                repr(entry.loss.dynamics),
                repr(entry.loss.l1_gamma),
                repr(entry.loss.total),
                repr(entry.grad_norm),
                f"{entry.seconds:.6f}",
            ]) + "\n")


def _random_instance(n: int, m: int, latent_dim: int, length: int,
                     relation_count: int, variant: ModelVariant, seed: int):
    """Generic check point: all blocks get O(0.1..1) random values so every
    derivative is large enough for 1e-6 central differences to resolve, and
    Gamma entries stay off the L1 kink."""
    rng = substream(seed, "gradcheck")
    mats = []
    for _ in range(relation_count):
        w = np.abs(rng.normal(size=(n, n)))
        np.fill_diagonal(w, 0.0)
        mats.append(w / w.sum(axis=1, keepdims=True))
    from .data import Relation
    relations = RelationSet(n, [Relation(f"w{r}", mats[r], "normalized_raw")
                                for r in range(relation_count)])
    x = SeriesTensor(rng.uniform(0.0, 1.0, size=(length, n, m)))
    z = LatentState(rng.normal(0.0, 0.5, size=(length, n, latent_dim)))
    gammas = None
    gate = None
    if variant.uses_gamma:
        draws = [rng.normal(0.0, 0.3, size=(n, n)) for _ in range(relation_count)]
        gammas = [np.where(u >= 0, 1.0, -1.0) * (0.05 + np.abs(u)) for u in draws]
    elif variant.is_gated:
        gate = DynamicGateParams(weights=rng.normal(0.0, 0.5, size=(relation_count, latent_dim)),
                                 biases=rng.normal(0.0, 0.5, size=relation_count))
    params = StnnParameters(
        theta0=np.eye(latent_dim) + rng.normal(0.0, 0.2, size=(latent_dim, latent_dim)),
        thetas=[rng.normal(0.0, 0.3, size=(latent_dim, latent_dim))
                for _ in range(relation_count)],
        decoder_weight=rng.normal(0.0, 0.3, size=(latent_dim, m)),
        decoder_bias=rng.normal(0.0, 0.1, size=m),
        gammas=gammas,
        gate=gate,
    )
    return x, z, params, relations


def grad_check(n: int, m: int, latent_dim: int, length: int, relation_count: int,
               variant: ModelVariant, lam: float, gamma: float,
               seed: int = 0, step: float = 1e-6) -> float:
    """Max relative error of analytic vs. central-difference gradients.

    Every scalar in every block is perturbed by +/- ``step``; the error for
    one scalar is |a - f| / max(1e-8, |a| + |f|) and the maximum over all
    scalars is returned.
    """
    variant = ModelVariant(variant)
    x, z, params, relations = _random_instance(n, m, latent_dim, length,
                                               relation_count, variant, seed)
    analytic = _grad_blocks(gradients(x, z, params, relations, variant, lam, gamma))
    blocks = _blocks_of(z, params)

    worst = 0.0
    for key, block in blocks.items():
        flat = block.ravel()
        ana = analytic[key].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss(x, z, params, relations, variant, lam, gamma).total
            flat[idx] = orig - step
            lo = loss(x, z, params, relations, variant, lam, gamma).total
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(ana[idx] - fd) / max(1e-8, abs(ana[idx]) + abs(fd))
            worst = max(worst, err)
    return worst
