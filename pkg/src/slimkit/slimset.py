"""Compact semantic calibration-set selection from prompt embeddings.

Pipeline: geometric median of the embedding cloud -> per-prompt
distinctiveness (distance to the median) -> quantile binning with
population-proportional quotas -> farthest-point sampling per bin under
cosine distance -> greedy cosine de-duplication. Fully deterministic for a
fixed pool and config; embeddings are ingested, never computed here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidMatrix

log = logging.getLogger(__name__)


@dataclass
class EmbeddingPool:
    ids: list[str]
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise InvalidMatrix("embedding matrix must be (len(ids), dim)")
        if len(set(self.ids)) != len(self.ids):
            raise InvalidMatrix("embedding ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidMatrix("embeddings contain non-finite entries")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0.0):
            raise InvalidMatrix("zero-norm embedding rows are not allowed")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class CoresetConfig:
    target_size: int
    bins: int = 8
    dedup_cos_threshold: float = 0.95
    median_tol: float = 1e-8
    median_max_iter: int = 200

    def __post_init__(self):
        if self.target_size < 1:
            raise ConfigError("target_size must be >= 1")
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")
        if not (0.0 < self.dedup_cos_threshold <= 1.0):
            raise ConfigError("dedup threshold must lie in (0, 1]")


@dataclass
class Coreset:
    selected_ids: list[str]
    distinctiveness: dict[str, float]
    median: np.ndarray
    quotas: list[int] = field(default_factory=list)


def geometric_median(vectors, tol: float = 1e-8, max_iter: int = 200) -> np.ndarray:
    """Weiszfeld iteration for the point minimizing summed distances.

    If an iterate lands on a data point (the classical singularity) it is
    nudged by 1e-9 times the cloud spread and iteration continues.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidMatrix("need a non-empty (n, d) array")
    if x.shape[0] == 1:
        return x[0].copy()
    c = x.mean(axis=0)
    spread = float(np.linalg.norm(x - c, axis=1).mean()) or 1.0
    for it in range(max_iter):
        d = np.linalg.norm(x - c, axis=1)
        hits = d < 1e-12 * spread
        if np.any(hits):
            c = c + 1e-9 * spread / np.sqrt(x.shape[1])
            d = np.linalg.norm(x - c, axis=1)
        inv = 1.0 / d
        c_new = (x * inv[:, None]).sum(axis=0) / inv.sum()
        step = float(np.linalg.norm(c_new - c))
        c = c_new
        if step < tol:
            return c
    log.warning("geometric median hit max_iter=%d (last step %.3e)", max_iter, step)
    return c


def distinctiveness(pool: EmbeddingPool, median) -> dict[str, float]:
    """Euclidean distance of each embedding to the median."""
    median = np.asarray(median, dtype=np.float64)
    if median.shape != (pool.dim,):
        raise InvalidMatrix(f"median must have dim {pool.dim}")
    d = np.linalg.norm(pool.vectors - median, axis=1)
    return {pid: float(di) for pid, di in zip(pool.ids, d)}


def allocate_bins(
    scores: dict[str, float], bins: int, target: int
) -> tuple[list[list[str]], list[int]]:
    """Quantile bins of the scores plus population-proportional quotas.

    Quantile edges are taken over the distinct score values (equal scores
    always land in the same bin), which gives near-equal bin populations
    for continuous scores. Quotas use the largest-remainder method so they
    sum to ``target`` exactly and never exceed a bin's population.
    """
    n = len(scores)
    if target > n:
        raise ConfigError(f"target {target} exceeds pool size {n}")
    distinct = sorted(set(scores.values()))
    if bins > len(distinct):
        raise ConfigError(f"bins {bins} exceeds {len(distinct)} distinct scores")
    edges = [int(np.floor(len(distinct) * b / bins)) for b in range(bins + 1)]
    bin_of_value = {}
    for b in range(bins):
        for v in distinct[edges[b] : edges[b + 1]]:
            bin_of_value[v] = b
    ordered = sorted(scores, key=lambda pid: (scores[pid], pid))
    members: list[list[str]] = [[] for _ in range(bins)]
    for pid in ordered:
        members[bin_of_value[scores[pid]]].append(pid)
    ideal = [target * len(m) / n for m in members]
    quotas = [int(np.floor(q)) for q in ideal]
    remainder = target - sum(quotas)
    by_frac = sorted(range(bins), key=lambda b: (-(ideal[b] - quotas[b]), b))
    for b in by_frac[:remainder]:
        quotas[b] += 1
    assert sum(quotas) == target
    return members, quotas


def fps_sample(vectors, quota: int, seed_scores) -> list[int]:
    """Greedy farthest-point sampling under cosine distance 1 - cos.

    Seeded at the highest-score point; each pick maximizes the minimum
    cosine distance to the already-selected set; ties break toward the
    lowest index.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n == 0 and quota > 0:
        raise ConfigError("positive quota for an empty bin")
    if quota > n:
        raise ConfigError(f"quota {quota} exceeds bin size {n}")
    if quota == 0:
        return []
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    seed_scores = np.asarray(seed_scores, dtype=np.float64)
    selected = [int(np.argmax(seed_scores))]
    min_dist = 1.0 - unit @ unit[selected[0]]
    while len(selected) < quota:
        min_dist[selected] = -np.inf
        nxt = int(np.argmax(min_dist))  # first max -> lowest index on ties
        selected.append(nxt)
        min_dist = np.minimum(min_dist, 1.0 - unit @ unit[nxt])
    return selected


def dedup(vectors, order: list[int], threshold: float) -> list[int]:
    """Greedy pass in selection order dropping near-duplicates.

    An item is dropped when its cosine similarity to any already-kept item
    exceeds ``threshold``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    kept: list[int] = []
    for idx in order:
        if all(float(unit[idx] @ unit[j]) <= threshold for j in kept):
            kept.append(idx)
    return kept


def build_coreset(pool: EmbeddingPool, config: CoresetConfig) -> Coreset:
    """Run the full selection pipeline on a pool of embeddings."""
    if config.target_size > pool.count:
        raise ConfigError(
            f"coreset size {config.target_size} exceeds pool size {pool.count}"
        )
    median = geometric_median(
        pool.vectors, tol=config.median_tol, max_iter=config.median_max_iter
    )
    scores = distinctiveness(pool, median)
    members, quotas = allocate_bins(scores, config.bins, config.target_size)
    index_of = {pid: i for i, pid in enumerate(pool.ids)}
    picked: list[int] = []
    for bin_ids, quota in zip(members, quotas):
        rows = [index_of[pid] for pid in bin_ids]
        local_scores = [scores[pid] for pid in bin_ids]
        chosen = fps_sample(pool.vectors[rows], quota, local_scores)
        picked.extend(rows[j] for j in chosen)
    kept = dedup(pool.vectors, picked, config.dedup_cos_threshold)
    return Coreset(
        selected_ids=[pool.ids[i] for i in kept],
        distinctiveness=scores,
        median=median,
        quotas=quotas,
    )


def subspace_overlap(a, b, k: int) -> float:
    """Mean principal-angle cosine between top-k eigenspaces of two PSD mats.

    Used as the stability metric between coresets drawn from disjoint pool
    halves: 1.0 means identical dominant subspaces.
    """
    wa, va = np.linalg.eigh(np.asarray(a, dtype=np.float64))
    wb, vb = np.linalg.eigh(np.asarray(b, dtype=np.float64))
    ua = va[:, np.argsort(wa)[::-1][:k]]
    ub = vb[:, np.argsort(wb)[::-1][:k]]
    cosines = np.linalg.svd(ua.T @ ub, compute_uv=False)
    return float(cosines.mean())
