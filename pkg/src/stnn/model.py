"""The latent relational forecasting model family.

Each series i carries a latent vector Z_t[i] at every step. One step of the
latent dynamics is

    g(Z_t) = tanh(Z_t @ theta0 + sum_r M_r @ Z_t @ theta_r)

where M_r depends on the variant: the prior W_r itself (stnn), the prior
refined entrywise by learned weights W_r * Gamma_r (stnn-r), the learned
weights alone (stnn-d), or the prior with each row i scaled by a logistic
gate of the receiving series' latent state (stnn-gate). A linear decoder
shared across series maps latents to observations.

The training objective is the mean squared reconstruction error plus
``lam`` times the mean squared one-step latent dynamics error plus ``gamma``
times the L1 norm of the Gamma blocks. Both squared-error terms are per-entry
means so the trade-off weights stay comparable across data sizes.

Public time indices (the ``pairs`` argument) are 1-based: pair t couples
Z_t and Z_{t+1} for t in [1, T-1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import NormalizationRecord, Relation, RelationSet, SeriesTensor
from .numerics import ShapeError

__all__ = [
    "ModelVariant",
    "LatentState",
    "DynamicGateParams",
    "StnnParameters",
    "LossBreakdown",
    "GradientSet",
    "StateError",
    "init_model",
    "dynamics_step",
    "dynamic_gate",
    "decode",
    "loss",
    "gradients",
    "extract_correlations",
    "dynamic_correlations",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]


class StateError(RuntimeError):
    """An operation was called on a model lacking the required state."""


class ModelVariant(str, Enum):
    STNN = "stnn"
    STNN_R = "stnn-r"
    STNN_D = "stnn-d"
    STNN_DYNAMIC_GATE = "stnn-gate"

    @property
    def uses_gamma(self) -> bool:
        return self in (ModelVariant.STNN_R, ModelVariant.STNN_D)

    @property
    def is_gated(self) -> bool:
        return self is ModelVariant.STNN_DYNAMIC_GATE

    @property
    def needs_prior(self) -> bool:
        return self is not ModelVariant.STNN_D


@dataclass
class LatentState:
    """Learned latent trajectory, shape (T, n, N)."""

    z: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.z, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"latent state must be 3-D (T, n, N), got {a.shape}")
        self.z = a

    @property
    def T(self) -> int:
        return self.z.shape[0]

    @property
    def n(self) -> int:
        return self.z.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.z.shape[2]


@dataclass
class DynamicGateParams:
    """Per-relation logistic gate: weight vector (length N) and scalar bias."""

    weights: np.ndarray  # (R, N)
    biases: np.ndarray  # (R,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError("gate weights must be (R, N) with one bias per relation")


@dataclass
class StnnParameters:
    theta0: np.ndarray  # (N, N)
    thetas: list[np.ndarray]  # R x (N, N)
    decoder_weight: np.ndarray  # (N, m)
    decoder_bias: np.ndarray  # (m,)
    gammas: list[np.ndarray] | None = None  # R x (n, n)
    gate: DynamicGateParams | None = None

    @property
    def latent_dim(self) -> int:
        return self.theta0.shape[0]

    @property
    def m(self) -> int:
        return self.decoder_weight.shape[1]

    @property
    def relation_count(self) -> int:
        return len(self.thetas)


@dataclass
class LossBreakdown:
    reconstruction: float
    dynamics: float
    l1_gamma: float
    total: float


@dataclass
class GradientSet:
    """Gradients mirroring every learnable block; untouched Z slices are 0."""

    z: np.ndarray
    theta0: np.ndarray
    thetas: list[np.ndarray]
    decoder_weight: np.ndarray
    decoder_bias: np.ndarray
    gammas: list[np.ndarray] | None = None
    gate_weights: np.ndarray | None = None
    gate_biases: np.ndarray | None = None

    @classmethod
    def zeros(cls, z: LatentState, params: StnnParameters) -> "GradientSet":
        return cls(
            z=np.zeros_like(z.z),
            theta0=np.zeros_like(params.theta0),
            thetas=[np.zeros_like(t) for t in params.thetas],
            decoder_weight=np.zeros_like(params.decoder_weight),
            decoder_bias=np.zeros_like(params.decoder_bias),
            gammas=None if params.gammas is None else [np.zeros_like(g) for g in params.gammas],
            gate_weights=None if params.gate is None else np.zeros_like(params.gate.weights),
            gate_biases=None if params.gate is None else np.zeros_like(params.gate.biases),
        )

    def arrays(self):
        out = [self.z, self.theta0, *self.thetas, self.decoder_weight, self.decoder_bias]
        if self.gammas is not None:
            out.extend(self.gammas)
        if self.gate_weights is not None:
            out.extend([self.gate_weights, self.gate_biases])
        return out

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


def init_model(n: int, m: int, latent_dim: int, relations: RelationSet,
               variant: ModelVariant, length: int,
               rng: np.random.Generator) -> tuple[LatentState, StnnParameters]:
    """Deterministically initialize latent state and parameters.

    Latents and decoder weights start small (std 0.1); theta0 starts near the
    identity so the latent dynamics begin close to a copy-forward map. For
    stnn-r the Gamma blocks start at exactly 1 (the prior passes through
    unchanged); for stnn-d they start at small non-negative magnitudes.
    """
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    if length < 2:
        raise ValueError(f"length must be >= 2, got {length}")
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    variant = ModelVariant(variant)
    count = len(relations)

    z = rng.normal(0.0, 0.1, size=(length, n, latent_dim))
    theta0 = rng.normal(0.0, 0.01, size=(latent_dim, latent_dim)) + np.eye(latent_dim)
    thetas = [rng.normal(0.0, 0.01, size=(latent_dim, latent_dim)) for _ in range(count)]
    decoder_w = rng.normal(0.0, 0.1, size=(latent_dim, m))
    decoder_b = np.zeros(m)

    gammas = None
    gate = None
    if variant is ModelVariant.STNN_R:
        gammas = [np.ones((n, n)) for _ in range(count)]
    elif variant is ModelVariant.STNN_D:
        gammas = [np.abs(rng.normal(0.0, 0.01, size=(n, n))) for _ in range(count)]
    elif variant.is_gated:
        gate = DynamicGateParams(weights=np.zeros((count, latent_dim)),
                                 biases=np.zeros(count))

    params = StnnParameters(theta0=theta0, thetas=thetas, decoder_weight=decoder_w,
                            decoder_bias=decoder_b, gammas=gammas, gate=gate)
    return LatentState(z), params


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _gate_values(zt: np.ndarray, gate: DynamicGateParams) -> np.ndarray:
    """Gate activations, shape (R, n): sigma(zt @ w_r + b_r) per relation."""
    return _sigmoid(zt @ gate.weights.T + gate.biases).T


def dynamic_gate(zt: np.ndarray, gate: DynamicGateParams | None,
                 relations: RelationSet) -> list[np.ndarray]:
    """Per-relation prior matrices with row i scaled by the receiving
    series' gate value sigma(w_r . zt[i] + b_r)."""
    if gate is None:
        raise StateError("dynamic gate parameters are not present on this model")
    gates = _gate_values(np.asarray(zt, dtype=np.float64), gate)
    return [w * s[:, None] for w, s in zip(relations.matrices(), gates)]


def _effective_relations(zt: np.ndarray, params: StnnParameters,
                         relations: RelationSet, variant: ModelVariant) -> list[np.ndarray]:
    if variant is ModelVariant.STNN:
        return relations.matrices()
    if variant is ModelVariant.STNN_R:
        if params.gammas is None:
            raise StateError("stnn-r model has no relation weights")
        return [w * g for w, g in zip(relations.matrices(), params.gammas)]
    if variant is ModelVariant.STNN_D:
        if params.gammas is None:
            raise StateError("stnn-d model has no relation weights")
        return list(params.gammas)
    return dynamic_gate(zt, params.gate, relations)


def _check_zt(zt: np.ndarray, params: StnnParameters, relations: RelationSet) -> np.ndarray:
    zt = np.asarray(zt, dtype=np.float64)
    if zt.ndim != 2 or zt.shape[1] != params.latent_dim:
        raise ShapeError(f"latent slice shape {zt.shape} incompatible with N={params.latent_dim}")
    if len(relations) != params.relation_count:
        raise ShapeError(f"{len(relations)} relations vs {params.relation_count} transition maps")
    return zt


def dynamics_step(zt: np.ndarray, params: StnnParameters, relations: RelationSet,
                  variant: ModelVariant) -> np.ndarray:
    """One step of the latent dynamics; outputs lie strictly in (-1, 1)."""
    variant = ModelVariant(variant)
    zt = _check_zt(zt, params, relations)
    pre = zt @ params.theta0
    for mat, theta in zip(_effective_relations(zt, params, relations, variant), params.thetas):
        pre = pre + mat @ zt @ theta
    return np.tanh(pre)


def decode(zt: np.ndarray, params: StnnParameters) -> np.ndarray:
    """Linear decoding shared across series: zt @ W_dec + bias."""
    zt = np.asarray(zt, dtype=np.float64)
    if zt.ndim != 2 or zt.shape[1] != params.latent_dim:
        raise ShapeError(f"latent slice shape {zt.shape} incompatible with N={params.latent_dim}")
    return zt @ params.decoder_weight + params.decoder_bias


def _resolve_terms(T: int, pairs) -> tuple[list[int], list[int]]:
    """Map the optional 1-based pair subset to reconstruction steps and
    dynamics pairs. Duplicated pairs count once per occurrence."""
    if pairs is None:
        return list(range(1, T + 1)), list(range(1, T))
    pair_ts = [int(t) for t in pairs]
    if not pair_ts:
        raise ValueError("pair set must not be empty")
    for t in pair_ts:
        if not (1 <= t <= T - 1):
            raise ValueError(f"pair index {t} outside [1, {T - 1}]")
    recon_ts = [s for t in pair_ts for s in (t, t + 1)]
    return recon_ts, pair_ts


def _l1_sum(params: StnnParameters) -> float:
    if params.gammas is None:
        return 0.0
    return float(sum(np.abs(g).sum() for g in params.gammas))


def loss(x: SeriesTensor, z: LatentState, params: StnnParameters,
         relations: RelationSet, variant: ModelVariant, lam: float, gamma: float,
         pairs=None, l1_scale: float = 1.0) -> LossBreakdown:
    """Objective value, broken into its three terms.

    reconstruction: per-entry mean squared decode error over the included
    steps. dynamics: per-entry mean squared one-step latent error over the
    included pairs (pre-lam). l1_gamma: sum of |Gamma| entries scaled by
    ``l1_scale`` (pre-gamma). When ``pairs`` is given, reconstruction covers
    both endpoints of every pair, duplicates included.
    """
    variant = ModelVariant(variant)
    if lam < 0 or gamma < 0:
        raise ValueError("lam and gamma must be non-negative")
    if x.T != z.T or x.n != z.n:
        raise ShapeError(f"series (T={x.T}, n={x.n}) vs latent (T={z.T}, n={z.n})")
    recon_ts, pair_ts = _resolve_terms(z.T, pairs)

    recon = 0.0
    for t in recon_ts:
        diff = decode(z.z[t - 1], params) - x.values[t - 1]
        recon += float(np.mean(diff * diff))
    recon /= len(recon_ts)

    dyn = 0.0
    for t in pair_ts:
        diff = z.z[t] - dynamics_step(z.z[t - 1], params, relations, variant)
        dyn += float(np.mean(diff * diff))
    dyn /= len(pair_ts)

    l1 = l1_scale * _l1_sum(params)
    return LossBreakdown(recon, dyn, l1, recon + lam * dyn + gamma * l1)


def gradients(x: SeriesTensor, z: LatentState, params: StnnParameters,
              relations: RelationSet, variant: ModelVariant, lam: float, gamma: float,
              pairs=None, l1_scale: float = 1.0) -> GradientSet:
    """Analytic gradients of :func:`loss` for every learnable block.

    The L1 subgradient uses sign(Gamma) with 0 at exact zeros, so zeros stay
    stationary under the penalty alone.
    """
    variant = ModelVariant(variant)
    if lam < 0 or gamma < 0:
        raise ValueError("lam and gamma must be non-negative")
    if x.T != z.T or x.n != z.n:
        raise ShapeError(f"series (T={x.T}, n={x.n}) vs latent (T={z.T}, n={z.n})")
    recon_ts, pair_ts = _resolve_terms(z.T, pairs)
    g = GradientSet.zeros(z, params)
    Z = z.z
    X = x.values
    n, latent_dim = z.n, z.latent_dim
    m = x.m

    coeff_rec = 2.0 / (len(recon_ts) * n * m)
    for t in recon_ts:
        zt = Z[t - 1]
        resid = decode(zt, params) - X[t - 1]
        g.z[t - 1] += coeff_rec * (resid @ params.decoder_weight.T)
        g.decoder_weight += coeff_rec * (zt.T @ resid)
        g.decoder_bias += coeff_rec * resid.sum(axis=0)

    w_mats = relations.matrices()
    coeff_dyn = 2.0 * lam / (len(pair_ts) * n * latent_dim)
    for t in pair_ts:
        zt = Z[t - 1]
        if variant.is_gated:
            gates = _gate_values(zt, params.gate)  # (R, n)
            mats = [w * s[:, None] for w, s in zip(w_mats, gates)]
        else:
            mats = _effective_relations(zt, params, relations, variant)
        pre = zt @ params.theta0
        projected = []  # zt @ theta_r, reused in the backward pass
        for mat, theta in zip(mats, params.thetas):
            y = zt @ theta
            projected.append(y)
            pre = pre + mat @ y
        gt = np.tanh(pre)
        u = Z[t] - gt
        g.z[t] += coeff_dyn * u
        s = -coeff_dyn * u * (1.0 - gt * gt)  # dL/dpre
        g.theta0 += zt.T @ s
        g.z[t - 1] += s @ params.theta0.T
        for r, (mat, theta, y) in enumerate(zip(mats, params.thetas, projected)):
            g.thetas[r] += (mat @ zt).T @ s
            g.z[t - 1] += mat.T @ s @ theta.T
            if variant is ModelVariant.STNN:
                continue
            dmat = s @ y.T  # dL/dM_r, (n, n)
            if variant is ModelVariant.STNN_R:
                g.gammas[r] += dmat * w_mats[r]
            elif variant is ModelVariant.STNN_D:
                g.gammas[r] += dmat
            else:
                sg = gates[r]
                drow = (dmat * w_mats[r]).sum(axis=1) * sg * (1.0 - sg)
                g.gate_weights[r] += zt.T @ drow
                g.gate_biases[r] += drow.sum()
                g.z[t - 1] += np.outer(drow, params.gate.weights[r])

    if gamma > 0 and params.gammas is not None:
        for r, gm in enumerate(params.gammas):
            g.gammas[r] += gamma * l1_scale * np.sign(gm)
    return g


def extract_correlations(params: StnnParameters, relations: RelationSet,
                         variant: ModelVariant):
    """Effective relation matrices plus each series' dominant relation.

    Returns (list of (label, matrix), dominant) where matrix is Gamma_r for
    the discovery variant and W_r * Gamma_r for the refining variant, and
    dominant[i] is the relation index with the largest row-aggregate
    absolute weight for series i.
    """
    variant = ModelVariant(variant)
    if not variant.uses_gamma:
        raise StateError(f"variant '{variant.value}' has no learned relation weights")
    if params.gammas is None or not params.gammas:
        raise StateError("model carries no relation weights to extract")
    labels = relations.labels()
    if variant is ModelVariant.STNN_R:
        effective = [w * g for w, g in zip(relations.matrices(), params.gammas)]
    else:
        effective = [g.copy() for g in params.gammas]
    strengths = np.stack([np.abs(mat).sum(axis=1) for mat in effective])  # (R, n)
    dominant = np.argmax(strengths, axis=0)
    return list(zip(labels, effective)), dominant


def dynamic_correlations(z: LatentState, params: StnnParameters, relations: RelationSet,
                         t_start: int, t_end: int):
    """Per-step dominant relation for the gated variant.

    Returns rows (t, i, relation_index, weight) for t in the 1-based
    inclusive range [t_start, t_end]; weight is the winning row-aggregate.
    """
    if params.gate is None:
        raise StateError("model has no dynamic gate parameters")
    if not (1 <= t_start <= t_end <= z.T):
        raise ValueError(f"time range [{t_start}, {t_end}] outside [1, {z.T}]")
    rows = []
    for t in range(t_start, t_end + 1):
        mats = dynamic_gate(z.z[t - 1], params.gate, relations)
        strengths = np.stack([np.abs(mat).sum(axis=1) for mat in mats])  # (R, n)
        dominant = np.argmax(strengths, axis=0)
        for i in range(z.n):
            rows.append((t, i, int(dominant[i]), float(strengths[dominant[i], i])))
    return rows


@dataclass
class Checkpoint:
    z: LatentState
    params: StnnParameters
    relations: RelationSet
    variant: ModelVariant
    lam: float
    gamma: float
    seed: int
    norm: NormalizationRecord | None = None
    time_step_label: str = "steps"


def save_checkpoint(path, z: LatentState, params: StnnParameters, relations: RelationSet,
                    variant: ModelVariant, lam: float, gamma: float, seed: int,
                    norm: NormalizationRecord | None = None,
                    time_step_label: str = "steps") -> None:
    """Write a self-contained JSON checkpoint.

    Floats use Python's shortest round-trip representation, so reloading
    reproduces every array bit for bit.
    """
    variant = ModelVariant(variant)
    doc = {
        "format": "stnn-checkpoint-v1",
        "variant": variant.value,
        "T": z.T,
        "n": z.n,
        "m": params.m,
        "latent_dim": params.latent_dim,
        "lambda": lam,
        "gamma": gamma,
        "seed": seed,
        "time_step_label": time_step_label,
        "relation_labels": relations.labels(),
        "relations": [
            {"label": rel.label, "provenance": rel.provenance,
             "matrix": rel.matrix.ravel().tolist()}
            for rel in relations
        ],
        "params": {
            "theta0": params.theta0.ravel().tolist(),
            "thetas": [t.ravel().tolist() for t in params.thetas],
            "decoder_weight": params.decoder_weight.ravel().tolist(),
            "decoder_bias": params.decoder_bias.tolist(),
            "gammas": None if params.gammas is None else [g.ravel().tolist() for g in params.gammas],
            "gate_weights": None if params.gate is None else params.gate.weights.ravel().tolist(),
            "gate_biases": None if params.gate is None else params.gate.biases.tolist(),
        },
        "latent": z.z.ravel().tolist(),
        "normalization": None if norm is None else norm.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "stnn-checkpoint-v1":
        raise ValueError(f"{path}: not a recognized checkpoint file")
    T, n, m, latent_dim = doc["T"], doc["n"], doc["m"], doc["latent_dim"]
    rels = RelationSet(n, [
        Relation(entry["label"],
                 np.array(entry["matrix"], dtype=np.float64).reshape(n, n),
                 entry["provenance"])
        for entry in doc["relations"]
    ])
    p = doc["params"]
    gammas = None
    if p["gammas"] is not None:
        gammas = [np.array(g, dtype=np.float64).reshape(n, n) for g in p["gammas"]]
    gate = None
    if p["gate_weights"] is not None:
        gate = DynamicGateParams(
            weights=np.array(p["gate_weights"], dtype=np.float64).reshape(len(rels), latent_dim),
            biases=np.array(p["gate_biases"], dtype=np.float64),
        )
    params = StnnParameters(
        theta0=np.array(p["theta0"], dtype=np.float64).reshape(latent_dim, latent_dim),
        thetas=[np.array(t, dtype=np.float64).reshape(latent_dim, latent_dim) for t in p["thetas"]],
        decoder_weight=np.array(p["decoder_weight"], dtype=np.float64).reshape(latent_dim, m),
        decoder_bias=np.array(p["decoder_bias"], dtype=np.float64),
        gammas=gammas,
        gate=gate,
    )
    norm = None
    if doc["normalization"] is not None:
        norm = NormalizationRecord.from_dict(doc["normalization"])
    return Checkpoint(
        z=LatentState(np.array(doc["latent"], dtype=np.float64).reshape(T, n, latent_dim)),
        params=params,
        relations=rels,
        variant=ModelVariant(doc["variant"]),
        lam=float(doc["lambda"]),
        gamma=float(doc["gamma"]),
        seed=int(doc["seed"]),
        norm=norm,
        time_step_label=doc.get("time_step_label", "steps"),
    )
