"""Observation tensors, relation priors, normalization, file I/O, and
synthetic generators.

File formats
------------
Series file: UTF-8 CSV without header, one row per time step, ``n*m`` numeric
columns ordered (series 0 dim 0, ..., series n-1 dim m-1), '.' decimal
separator.

Relation file: UTF-8 CSV rows ``label,i,j,weight`` with 0-based indices.
Direction is "j influences i": the weight lands in row i, column j, so that
``W @ Z`` aggregates over the source index j.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, matmul, substream

RAW = "raw"
POWER = "power_k"
NORMALIZED_RAW = "normalized_raw"
NORMALIZED_POWER = "normalized_power_k"

_NORMALIZE_MAP = {RAW: NORMALIZED_RAW, POWER: NORMALIZED_POWER}


class ParseError(ValueError):
    """A data file could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


@dataclass
class NormalizationRecord:
    """Per-column min/max statistics fitted on a training window.

    ``fit_start``/``fit_end`` are 1-based inclusive time steps. Columns with
    ``max == min`` are flagged constant and map to 0.5.
    """

    mins: np.ndarray  # (n, m)
    maxs: np.ndarray  # (n, m)
    constant: np.ndarray  # (n, m) bool
    fit_start: int
    fit_end: int

    def apply(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 1.0, self.maxs - self.mins)
        scaled = (values - self.mins) / span
        return np.where(self.constant, 0.5, scaled)

    def invert(self, values: np.ndarray) -> np.ndarray:
        # Constant columns carry no scale; every value maps back to the
        # (single) observed level.
        span = np.where(self.constant, 0.0, self.maxs - self.mins)
        return values * span + self.mins

    def to_dict(self) -> dict:
        return {
            "mins": self.mins.ravel().tolist(),
            "maxs": self.maxs.ravel().tolist(),
            "constant": self.constant.ravel().astype(int).tolist(),
            "shape": list(self.mins.shape),
            "fit_start": self.fit_start,
            "fit_end": self.fit_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        shape = tuple(d["shape"])
        return cls(
            mins=np.array(d["mins"], dtype=np.float64).reshape(shape),
            maxs=np.array(d["maxs"], dtype=np.float64).reshape(shape),
            constant=np.array(d["constant"], dtype=bool).reshape(shape),
            fit_start=int(d["fit_start"]),
            fit_end=int(d["fit_end"]),
        )


@dataclass
class SeriesTensor:
    """Observations for n series of dimensionality m over T time steps.

    ``values`` has shape (T, n, m). ``norm`` records the scaling applied, if
    any, so predictions can be mapped back to original units.
    """

    values: np.ndarray
    time_step_label: str = "steps"
    norm: NormalizationRecord | None = None

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"series tensor must be 3-D (T, n, m), got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("series tensor contains non-finite entries")
        self.values = a

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def window(self, start: int, stop: int) -> "SeriesTensor":
        """Slice time steps [start, stop) (0-based, half-open)."""
        if not (0 <= start < stop <= self.T):
            raise ValueError(f"window [{start}, {stop}) out of range for T={self.T}")
        return SeriesTensor(self.values[start:stop].copy(), self.time_step_label, self.norm)


def load_series(path, n: int, m: int, time_step_label: str = "steps") -> SeriesTensor:
    """Load a series CSV; T is inferred from the row count."""
    rows = []
    expected = n * m
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != expected:
                raise ParseError(
                    f"expected {expected} columns (n={n} x m={m}), got {len(cells)}",
                    path=path, line=lineno,
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell: {exc}", path=path, line=lineno) from None
    if not rows:
        raise ParseError("series file contains no data rows", path=path)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), n, m)
    if not np.isfinite(values).all():
        raise ParseError("series file contains non-finite values", path=path)
    return SeriesTensor(values, time_step_label)


def save_series(x: SeriesTensor, path) -> None:
    """Write a series CSV; floats use shortest round-trip representation."""
    flat = x.values.reshape(x.T, x.n * x.m)
    with open(path, "w", encoding="utf-8") as fh:
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def normalize(x: SeriesTensor, fit_range: tuple[int, int] | None = None):
    """Min-max scale each (series, dimension) column to [0, 1].

    Statistics come from ``fit_range`` only (1-based inclusive; default the
    whole tensor). Values outside the fit range may map outside [0, 1];
    clipping is deliberately not applied. Constant columns map to 0.5.

    Returns the scaled tensor (with the record attached) and the record.
    """
    if fit_range is None:
        fit_range = (1, x.T)
    lo, hi = int(fit_range[0]), int(fit_range[1])
    if not (1 <= lo <= hi <= x.T):
        raise ValueError(f"fit_range ({lo}, {hi}) not within [1, {x.T}]")
    window = x.values[lo - 1 : hi]
    mins = window.min(axis=0)
    maxs = window.max(axis=0)
    record = NormalizationRecord(mins=mins, maxs=maxs, constant=(maxs == mins),
                                 fit_start=lo, fit_end=hi)
    return SeriesTensor(record.apply(x.values), x.time_step_label, record), record


def denormalize(x: SeriesTensor, record: NormalizationRecord | None = None) -> SeriesTensor:
    """Map a scaled tensor back to original units using ``record``."""
    record = record if record is not None else x.norm
    if record is None:
        raise ValueError("no normalization record available")
    return SeriesTensor(record.invert(x.values), x.time_step_label, None)


@dataclass
class Relation:
    label: str
    matrix: np.ndarray  # (n, n), non-negative
    provenance: str = RAW


class RelationSet:
    """Ordered collection of n x n prior matrices, one per relation type."""

    def __init__(self, n: int, relations: list[Relation] | None = None):
        self.n = int(n)
        self.relations = list(relations or [])
        for rel in self.relations:
            rel.matrix = as_matrix(rel.matrix, rows=self.n, cols=self.n)
            if (rel.matrix < 0).any():
                raise ValueError(f"relation '{rel.label}' has negative entries")

    def __len__(self) -> int:
        return len(self.relations)

    def __iter__(self):
        return iter(self.relations)

    def matrices(self) -> list[np.ndarray]:
        return [rel.matrix for rel in self.relations]

    def labels(self) -> list[str]:
        return [rel.label for rel in self.relations]

    def normalized(self) -> "RelationSet":
        """Row-normalize every matrix so aggregation averages over sources.

        Rows that sum to zero (isolated receivers) stay zero.
        """
        out = []
        for rel in self.relations:
            out.append(Relation(rel.label, row_normalize(rel.matrix),
                                _NORMALIZE_MAP.get(rel.provenance, rel.provenance)))
        return RelationSet(self.n, out)

    @staticmethod
    def placeholder(n: int, count: int) -> "RelationSet":
        """Zero-matrix stand-ins used when no prior is available (the
        discovery variant learns relation weights from scratch)."""
        rels = [Relation(f"g{r}", np.zeros((n, n)), RAW) for r in range(count)]
        return RelationSet(n, rels)


def row_normalize(mat: np.ndarray) -> np.ndarray:
    """Scale each row to sum to 1; all-zero rows are left untouched."""
    mat = np.asarray(mat, dtype=np.float64)
    sums = mat.sum(axis=1, keepdims=True)
    safe = np.where(sums == 0.0, 1.0, sums)
    return mat / safe


def load_relations(path, n: int) -> RelationSet:
    """Load an edge-list CSV into one matrix per distinct relation label.

    Unlisted entries are zero; duplicate edges are summed with a warning.
    """
    order: list[str] = []
    matrices: dict[str, np.ndarray] = {}
    seen: set[tuple[str, int, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 4:
                raise ParseError(f"expected 'label,i,j,weight', got {len(cells)} fields",
                                 path=path, line=lineno)
            label = cells[0].strip()
            try:
                i, j = int(cells[1]), int(cells[2])
                weight = float(cells[3])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell: {exc}", path=path, line=lineno) from None
            if not (0 <= i < n) or not (0 <= j < n):
                raise ParseError(f"index ({i}, {j}) out of [0, {n})", path=path, line=lineno)
            if weight < 0:
                raise ParseError(f"negative weight {weight}", path=path, line=lineno)
            if label not in matrices:
                matrices[label] = np.zeros((n, n))
                order.append(label)
            if (label, i, j) in seen:
                warnings.warn(f"{path}:{lineno}: duplicate edge {label},{i},{j}; weights summed")
            seen.add((label, i, j))
            matrices[label][i, j] += weight
    return RelationSet(n, [Relation(label, matrices[label], RAW) for label in order])


def save_relations(relations: RelationSet, path) -> None:
    """Write the nonzero entries of every relation as ``label,i,j,weight``."""
    with open(path, "w", encoding="utf-8") as fh:
        for rel in relations:
            rows, cols = np.nonzero(rel.matrix)
            for i, j in zip(rows.tolist(), cols.tolist()):
                fh.write(f"{rel.label},{i},{j},{repr(float(rel.matrix[i, j]))}\n")


def build_powers(base: np.ndarray, powers: int) -> RelationSet:
    """Relations W^(1)..W^(K) from one base matrix.

    Raw matrix powers are formed first (W, W@W, ...); each power then has its
    diagonal zeroed (self-influence is the job of the intra-dependency map)
    and is row-normalized.
    """
    if powers < 1:
        raise ValueError(f"power count must be >= 1, got {powers}")
    base = as_matrix(base)
    if base.shape[0] != base.shape[1]:
        raise ValueError(f"base relation must be square, got {base.shape}")
    if (base < 0).any():
        raise ValueError("base relation has negative entries")
    rels = []
    current = base
    for k in range(1, powers + 1):
        mat = current.copy()
        np.fill_diagonal(mat, 0.0)
        rels.append(Relation(f"w{k}", row_normalize(mat), NORMALIZED_POWER))
        if k < powers:
            current = matmul(current, base)
    return RelationSet(base.shape[0], rels)


def grid_adjacency(rows: int, cols: int) -> np.ndarray:
    """Binary 4-neighbor adjacency of a rows x cols lattice."""
    n = rows * cols
    w = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    w[i, rr * cols + cc] = 1.0
    return w


TEACHER = "teacher_stnn"
DIFFUSION = "grid_diffusion"


@dataclass
class SyntheticSpec:
    """Configuration for the desk-scale synthetic generators.

    ``grid`` is (rows, cols) with rows*cols == n; alternatively ``edges``
    lists (i, j) pairs of a custom graph. ``alpha`` is the diffusion mixing
    weight; ``initial`` optionally pins the diffusion start state.
    """

    kind: str
    n: int
    m: int = 1
    latent_dim: int = 3
    length: int = 200
    grid: tuple[int, int] | None = None
    edges: list[tuple[int, int]] | None = None
    noise_std: float = 0.01
    alpha: float = 0.5
    seed: int = 0
    initial: np.ndarray | None = None

    def adjacency(self) -> np.ndarray:
        if self.grid is not None:
            rows, cols = self.grid
            if rows * cols != self.n:
                raise ValueError(f"grid {rows}x{cols} does not match n={self.n}")
            return grid_adjacency(rows, cols)
        if self.edges is not None:
            w = np.zeros((self.n, self.n))
            for i, j in self.edges:
                if not (0 <= i < self.n and 0 <= j < self.n):
                    raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
                w[i, j] = 1.0
                w[j, i] = 1.0
            return w
        raise ValueError("synthetic spec needs a grid or an edge list")

    def validate(self) -> None:
        if self.kind not in (TEACHER, DIFFUSION):
            raise ValueError(f"unknown synthetic kind '{self.kind}'")
        for name in ("n", "m", "latent_dim", "length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.length < 2:
            raise ValueError("length must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


# Teacher dynamics scales: the intra map is a scaled rotation, the relational
# map a stronger one, so each series' future hinges on its neighbors and the
# summed linearization sits just past unit spectral radius (tanh keeps
# trajectories bounded without collapsing). noise_std enters twice: scaled up
# as process noise inside the latent recurrence, which injects per-step
# randomness that is visible to neighbors but not recoverable from a series'
# own history, and unscaled as observation noise on the decoded values.
_TEACHER_THETA0_SCALE = 0.55
_TEACHER_THETA1_SCALE = 0.95
_TEACHER_Z1_STD = 0.5
_TEACHER_PROCESS_NOISE_MULT = 10.0


def generate_synthetic(spec: SyntheticSpec):
    """Generate (series, relations, ground-truth record) per ``spec``.

    teacher_stnn rolls latent relational dynamics forward from a random
    initial latent state and decodes linearly with additive Gaussian noise;
    grid_diffusion iterates x_{t+1} = (1-alpha) x_t + alpha W_hat x_t + noise
    with W_hat the row-normalized adjacency.
    """
    spec.validate()
    adjacency = spec.adjacency()
    rng = substream(spec.seed, "synthetic")
    edges = [(int(i), int(j), float(adjacency[i, j]))
             for i, j in zip(*np.nonzero(adjacency))]
    record = {"kind": spec.kind, "seed": spec.seed, "adjacency": edges,
              "n": spec.n, "m": spec.m, "length": spec.length}

    if spec.kind == TEACHER:
        w_hat = row_normalize(adjacency)
        theta0 = _TEACHER_THETA0_SCALE * _random_orthogonal(spec.latent_dim, rng)
        theta1 = _TEACHER_THETA1_SCALE * _random_orthogonal(spec.latent_dim, rng)
        z1 = rng.normal(0.0, _TEACHER_Z1_STD, size=(spec.n, spec.latent_dim))
        decoder_w = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim),
                               size=(spec.latent_dim, spec.m))
        decoder_b = np.zeros(spec.m)
        process_std = _TEACHER_PROCESS_NOISE_MULT * spec.noise_std
        z = np.empty((spec.length, spec.n, spec.latent_dim))
        z[0] = z1
        for t in range(spec.length - 1):
            z[t + 1] = np.tanh(z[t] @ theta0 + w_hat @ z[t] @ theta1)
            if spec.noise_std:
                z[t + 1] += rng.normal(0.0, process_std, size=z[t + 1].shape)
        clean = z @ decoder_w + decoder_b
        noise = rng.normal(0.0, spec.noise_std, size=clean.shape) if spec.noise_std else 0.0
        values = clean + noise
        record.update({
            "latent_dim": spec.latent_dim,
            "theta0": theta0.ravel().tolist(),
            "theta1": theta1.ravel().tolist(),
            "decoder_weight": decoder_w.ravel().tolist(),
            "decoder_bias": decoder_b.tolist(),
            "z1": z1.ravel().tolist(),
            "w_row_normalized": True,
        })
    else:
        w_hat = row_normalize(adjacency)
        if spec.initial is not None:
            x1 = np.asarray(spec.initial, dtype=np.float64).reshape(spec.n, spec.m)
        else:
            x1 = rng.uniform(0.0, 1.0, size=(spec.n, spec.m))
        values = np.empty((spec.length, spec.n, spec.m))
        values[0] = x1
        for t in range(spec.length - 1):
            mixed = (1.0 - spec.alpha) * values[t] + spec.alpha * (w_hat @ values[t])
            if spec.noise_std:
                mixed = mixed + rng.normal(0.0, spec.noise_std, size=mixed.shape)
            values[t + 1] = mixed
        record["alpha"] = spec.alpha

    series = SeriesTensor(values, time_step_label="steps")
    relations = RelationSet(spec.n, [Relation("w", adjacency, RAW)])
    return series, relations, record


def save_truth(record: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1)
        fh.write("\n")


def load_truth(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
