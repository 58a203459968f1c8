"""Activation-statistics calibration.

Accumulates per-(module-input, timestep) second moments from activation
streams, regularizes them, scores weight/activation alignment with the
trace-normalized Rayleigh quotient (TRQ), and mixes per-timestep statistics
into a single whitening correlation per module input with cached PSD roots.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import (
    DegenerateInput,
    EmptyAccumulator,
    MergeKeyError,
    ShapeError,
)

# Timestep label for statistics that do not depend on the denoising step
# (text-token inputs are computed once and reused).
TIME_INVARIANT = -1


class InputKind(str, enum.Enum):
    SA_INPUT = "sa_input"
    CA_QUERY_INPUT = "ca_query_input"
    TEXT_TOKENS = "text_tokens"
    FFN_INTERMEDIATE = "ffn_intermediate"


@dataclass
class CorrelationStat:
    """Running sum of x^T x over activation rows for one (layer, kind, t).

    Single-writer: ``accumulate`` mutates in place. Parallel calibration
    shards streams into independent stats and combines them with ``merge``.
    """

    layer_id: str
    timestep: int
    input_kind: InputKind
    dim: int
    sum_outer: np.ndarray = None
    samples: int = 0

    def __post_init__(self):
        if self.dim <= 0:
            raise ShapeError("dim must be positive")
        if self.sum_outer is None:
            self.sum_outer = np.zeros((self.dim, self.dim))
        self.input_kind = InputKind(self.input_kind)

    def key(self):
        return (self.layer_id, self.timestep, self.input_kind, self.dim)


@dataclass
class RegularizedCorrelation:
    c_tilde: np.ndarray
    lambda_used: float


@dataclass
class InfluenceScore:
    layer_id: str
    timestep: int
    value: float


@dataclass
class MixedCorrelation:
    """Convex timestep mixture of regularized correlations with PSD roots."""

    layer_id: str
    c_bar: np.ndarray
    r_bar: np.ndarray
    r_bar_inv: np.ndarray
    weights: dict[int, float] = field(default_factory=dict)
    min_eig: float = 0.0
    floor_eps: float = 0.0

    @classmethod
    def from_matrix(cls, c, layer_id: str = "", eps: float | None = None):
        """Wrap a single PSD correlation (weight 1) with cached roots."""
        c = linalg.as_matrix(c, "correlation")
        root, inv_root, min_eig = linalg.psd_roots(c, eps=eps)
        return cls(
            layer_id=layer_id,
            c_bar=c,
            r_bar=root,
            r_bar_inv=inv_root,
            weights={TIME_INVARIANT: 1.0},
            min_eig=min_eig,
            floor_eps=eps if eps is not None else linalg.default_inv_sqrt_floor(c),
        )


def accumulate(stat: CorrelationStat, batch) -> CorrelationStat:
    """Fold a (rows, dim) activation batch into the running second moment."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != stat.dim:
        raise ShapeError(
            f"batch shape {batch.shape} incompatible with dim {stat.dim}"
        )
    if not np.all(np.isfinite(batch)):
        raise ShapeError("batch contains non-finite entries")
    stat.sum_outer += batch.T @ batch
    stat.samples += batch.shape[0]
    return stat


def merge(a: CorrelationStat, b: CorrelationStat) -> CorrelationStat:
    """Combine two shards of the same stream (a's sums first, then b's)."""
    if a.key() != b.key():
        raise MergeKeyError(f"cannot merge stats {a.key()} and {b.key()}")
    return CorrelationStat(
        layer_id=a.layer_id,
        timestep=a.timestep,
        input_kind=a.input_kind,
        dim=a.dim,
        sum_outer=a.sum_outer + b.sum_outer,
        samples=a.samples + b.samples,
    )


def finalize(stat: CorrelationStat, lam: float = 1e-4) -> RegularizedCorrelation:
    """Normalized second moment with trace-relative shrinkage.

    C = sum/N + lam * (trace(sum/N)/dim) * I, symmetrized. The shrinkage is
    scale-relative so conditioning does not depend on activation magnitude.
    """
    if stat.samples < 1:
        raise EmptyAccumulator(f"no samples accumulated for {stat.key()}")
    c = stat.sum_outer / stat.samples
    c = 0.5 * (c + c.T)
    c = c + lam * (float(np.trace(c)) / stat.dim) * np.eye(stat.dim)
    return RegularizedCorrelation(c_tilde=c, lambda_used=lam)


def trq_score(w, c_tilde) -> float:
    """Trace-normalized Rayleigh quotient of a weight matrix.

    (tr(w^T C w) / ||w||_F^2) / tr(C), in [0, 1]. Invariant to rescaling
    either argument; evaluated in this order so the isotropic case C = I
    returns exactly 1/dim.
    """
    w = np.asarray(w, dtype=np.float64)
    c = linalg.as_matrix(c_tilde, "correlation")
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] != c.shape[0]:
        raise ShapeError(f"weight rows {w.shape[0]} != correlation dim {c.shape[0]}")
    wnorm2 = float(np.sum(w * w))
    trace = float(np.trace(c))
    if wnorm2 <= 0.0 or trace <= 0.0:
        raise DegenerateInput("zero weight matrix or zero-trace correlation")
    num = float(np.sum((c @ w) * w))
    value = (num / wnorm2) / trace
    return min(max(value, 0.0), 1.0)  # guard fp overshoot at the boundary


def spectral_diversity(c) -> float:
    """Normalized eigenvalue entropy of a PSD correlation, in [0, 1].

    1 means a flat spectrum (isotropic input), 0 a single active direction.
    """
    c = linalg.as_matrix(c, "correlation")
    w = np.maximum(np.linalg.eigvalsh(0.5 * (c + c.T)), 0.0)
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateInput("zero-trace correlation")
    p = w / total
    p = p[p > 0.0]
    if c.shape[0] < 2:
        return 1.0
    return float(-(p * np.log(p)).sum() / math.log(c.shape[0]))


WEIGHTING_STRATEGIES = ("uniform", "trq_proportional", "trq_softmax")


def mixture_weights(
    scores: list[InfluenceScore],
    strategy: str = "trq_proportional",
    tau: float = 1.0,
) -> dict[int, float]:
    """Convex timestep weights for one layer derived from influence scores."""
    if not scores:
        raise DegenerateInput("no influence scores given")
    layers = {s.layer_id for s in scores}
    if len(layers) != 1:
        raise MergeKeyError(f"scores span multiple layers: {sorted(layers)}")
    tsteps = [s.timestep for s in scores]
    if len(set(tsteps)) != len(tsteps):
        raise MergeKeyError("duplicate timesteps in scores")
    values = np.array([s.value for s in scores], dtype=np.float64)
    if strategy == "uniform":
        w = np.full(len(values), 1.0 / len(values))
    elif strategy == "trq_proportional":
        total = values.sum()
        if total <= 0.0:
            raise DegenerateInput("all influence scores are zero")
        w = values / total
    elif strategy == "trq_softmax":
        if tau <= 0.0:
            raise DegenerateInput("softmax temperature must be positive")
        z = values / tau
        z -= z.max()
        e = np.exp(z)
        w = e / e.sum()
    else:
        raise DegenerateInput(f"unknown weighting strategy {strategy!r}")
    return {t: float(wi) for t, wi in zip(tsteps, w)}


def mix(
    correlations: dict[int, RegularizedCorrelation],
    weights: dict[int, float],
    layer_id: str = "",
    eps: float | None = None,
) -> MixedCorrelation:
    """Fidelity-weighted convex combination of per-timestep correlations.

    A single time-invariant statistic (e.g. text tokens) is the degenerate
    one-key case with weight 1.
    """
    if set(correlations) != set(weights):
        raise MergeKeyError(
            f"weight keys {sorted(weights)} != correlation keys {sorted(correlations)}"
        )
    wvals = np.array([weights[t] for t in sorted(weights)])
    if np.any(wvals < -1e-15) or abs(wvals.sum() - 1.0) > 1e-9:
        raise DegenerateInput("weights must be non-negative and sum to 1")
    dims = {c.c_tilde.shape for c in correlations.values()}
    if len(dims) != 1:
        raise MergeKeyError(f"mixed correlation dims differ: {sorted(dims)}")
    c_bar = None
    for t in sorted(correlations):
        term = weights[t] * correlations[t].c_tilde
        c_bar = term if c_bar is None else c_bar + term
    c_bar = 0.5 * (c_bar + c_bar.T)
    root, inv_root, min_eig = linalg.psd_roots(c_bar, eps=eps)
    return MixedCorrelation(
        layer_id=layer_id,
        c_bar=c_bar,
        r_bar=root,
        r_bar_inv=inv_root,
        weights=dict(weights),
        min_eig=min_eig,
        floor_eps=eps if eps is not None else linalg.default_inv_sqrt_floor(c_bar),
    )
