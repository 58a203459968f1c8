"""Module-aligned data-aware compression of transformer weight groups.

Three closed-form decompositions, one per functional group:

* gated feed-forward: both up-projections share a column selection chosen
  by pivoted QR on the (correlation-normalized) intermediate second moment,
  and the down-projection is re-solved in closed form against the raw
  second moment;
* query-key: per head, the cross-product is whitened by the input
  correlation roots on both sides, SVD-truncated, and unwhitened;
* value-output: per head, the composite map is whitened on the value side
  only, SVD-truncated, and unwhitened.

All compressions are pure functions; heads are processed independently and
concatenated in head order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import linalg
from .calib import MixedCorrelation
from .errors import (
    NotSymmetric,
    RankOutOfRange,
    ShapeError,
    WhiteningSingular,
)

GATE_KINDS = ("gelu", "silu", "identity")


def apply_gate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    if kind == "silu":
        return x / (1.0 + np.exp(-x))
    if kind == "identity":
        return x
    raise ShapeError(f"unknown gate kind {kind!r}")


@dataclass
class ModuleShape:
    d_model: int
    heads: int
    ffn_inner: int

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ShapeError(
                f"heads {self.heads} must divide d_model {self.d_model}"
            )
        if self.ffn_inner < self.d_model:
            raise ShapeError("ffn_inner must be at least d_model")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class QkGroup:
    """Query/key projections stored head-concatenated: (in_dim, H * head_dim)."""

    w_q: np.ndarray
    w_k: np.ndarray
    heads: int
    head_dim: int
    attention: str = "self"  # self | cross

    def __post_init__(self):
        expect = self.heads * self.head_dim
        if self.w_q.shape[1] != expect or self.w_k.shape[1] != expect:
            raise ShapeError("q/k column count must equal heads * head_dim")

    def head(self, j: int):
        s = slice(j * self.head_dim, (j + 1) * self.head_dim)
        return self.w_q[:, s], self.w_k[:, s]


@dataclass
class VoGroup:
    """Value (in_dim, H*head_dim) and output (H*head_dim, out_dim) projections."""

    w_v: np.ndarray
    w_o: np.ndarray
    heads: int
    head_dim: int
    attention: str = "self"

    def __post_init__(self):
        expect = self.heads * self.head_dim
        if self.w_v.shape[1] != expect or self.w_o.shape[0] != expect:
            raise ShapeError("v/o inner dims must equal heads * head_dim")

    def head(self, j: int):
        s = slice(j * self.head_dim, (j + 1) * self.head_dim)
        return self.w_v[:, s], self.w_o[s, :]


@dataclass
class FfnGroup:
    """Gated feed-forward: content w_x, gate w_g (d, d_int), down w_d (d_int, d)."""

    w_x: np.ndarray
    w_g: np.ndarray
    w_d: np.ndarray
    gate_kind: str = "gelu"

    def __post_init__(self):
        if self.w_x.shape != self.w_g.shape:
            raise ShapeError("w_x and w_g must share a shape")
        if self.w_d.shape[0] != self.w_x.shape[1]:
            raise ShapeError("w_d rows must equal the intermediate width")
        if self.gate_kind not in GATE_KINDS:
            raise ShapeError(f"unknown gate kind {self.gate_kind!r}")

    @property
    def inner(self) -> int:
        return self.w_x.shape[1]

    def intermediate(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.w_x) * apply_gate(x @ self.w_g, self.gate_kind)


@dataclass
class CompressedGroup:
    """A replacement group with reduced inner width plus error bookkeeping."""

    kind: str  # qk | vo | ffn
    group: object
    achieved_rank: int
    predicted_error: float
    original: object
    selection: linalg.ColumnSelection | None = None


def _whitening(c: MixedCorrelation, expect_dim: int, side: str):
    if c.c_bar.shape[0] != expect_dim:
        raise ShapeError(
            f"{side} correlation dim {c.c_bar.shape[0]} != weight rows {expect_dim}"
        )
    if c.min_eig <= c.floor_eps:
        raise WhiteningSingular(
            f"{side} whitening root is singular (min eigenvalue {c.min_eig:.3e}); "
            "increase the regularization lambda"
        )
    return c.r_bar, c.r_bar_inv


def compress_qk(
    g: QkGroup, c_q: MixedCorrelation, c_k: MixedCorrelation, r: int
) -> CompressedGroup:
    """Whitened-SVD compression of the query-key cross-product per head.

    The per-head product w_q w_k^T is preserved optimally under the norm
    induced by the input correlations; predicted_error is the summed
    discarded spectral energy over heads.
    """
    if not (1 <= r <= g.head_dim):
        raise RankOutOfRange(f"rank {r} not in [1, {g.head_dim}]")
    r_q, r_q_inv = _whitening(c_q, g.w_q.shape[0], "query")
    r_k, r_k_inv = _whitening(c_k, g.w_k.shape[0], "key")
    q_parts, k_parts, tail = [], [], 0.0
    for j in range(g.heads):
        wq_j, wk_j = g.head(j)
        res = linalg.svd_truncate((r_q @ wq_j) @ (r_k @ wk_j).T, r)
        q_parts.append(r_q_inv @ res.u)
        k_parts.append(r_k_inv @ (res.v * res.singular_values))
        tail += res.tail_energy
    compressed = QkGroup(
        w_q=np.hstack(q_parts),
        w_k=np.hstack(k_parts),
        heads=g.heads,
        head_dim=r,
        attention=g.attention,
    )
    return CompressedGroup("qk", compressed, r, tail, g)


def compress_vo(g: VoGroup, c_v: MixedCorrelation, r: int) -> CompressedGroup:
    """Whitened-SVD compression of the value-output composite per head.

    Only the value side is whitened; the reconstruction error under the
    value-input correlation equals the discarded spectral energy exactly.
    """
    if not (1 <= r <= g.head_dim):
        raise RankOutOfRange(f"rank {r} not in [1, {g.head_dim}]")
    r_v, r_v_inv = _whitening(c_v, g.w_v.shape[0], "value")
    v_parts, o_parts, tail = [], [], 0.0
    for j in range(g.heads):
        wv_j, wo_j = g.head(j)
        res = linalg.svd_truncate(r_v @ wv_j @ wo_j, r)
        v_parts.append(r_v_inv @ res.u)
        o_parts.append(res.singular_values[:, None] * res.v.T)
        tail += res.tail_energy
    compressed = VoGroup(
        w_v=np.hstack(v_parts),
        w_o=np.vstack(o_parts),
        heads=g.heads,
        head_dim=r,
        attention=g.attention,
    )
    return CompressedGroup("vo", compressed, r, tail, g)


def compress_ffn(g: FfnGroup, k_stats, k: int) -> CompressedGroup:
    """Column-selection compression of a gated feed-forward group.

    Pivoting runs on the correlation-normalized second moment (unit
    diagonal) so channel scale does not dominate, while the closed-form
    down-projection solve uses the raw second moment. Channels with
    (near-)zero variance are excluded from selection; if k exceeds the
    active channel count the selection is topped up with the inert
    channels in index order.
    """
    k_mat = linalg.as_matrix(k_stats, "intermediate correlation")
    d_int = g.inner
    if k_mat.shape != (d_int, d_int):
        raise ShapeError(
            f"correlation shape {k_mat.shape} != ({d_int}, {d_int})"
        )
    if float(np.abs(k_mat - k_mat.T).max()) > 1e-8 * max(1.0, float(np.abs(k_mat).max())):
        raise NotSymmetric("intermediate correlation is not symmetric")
    k_mat = 0.5 * (k_mat + k_mat.T)
    if not (1 <= k <= d_int):
        raise RankOutOfRange(f"k {k} not in [1, {d_int}]")

    diag = np.diag(k_mat).copy()
    active = np.flatnonzero(diag >= 1e-12 * float(np.trace(k_mat)) / d_int)
    if active.size == 0:
        raise WhiteningSingular("intermediate correlation has no active channels")
    inv_root_diag = 1.0 / np.sqrt(diag[active])
    k_corr = k_mat[np.ix_(active, active)] * np.outer(inv_root_diag, inv_root_diag)

    k_active = min(k, active.size)
    pivots = linalg.cpqr_select(k_corr, k_active).selected
    chosen = [int(active[p]) for p in pivots]
    if k > active.size:
        inert = sorted(set(range(d_int)) - set(int(a) for a in active))
        chosen.extend(inert[: k - active.size])
    sel = linalg.ColumnSelection(d_int, chosen)

    core = k_mat[np.ix_(sel.selected, sel.selected)]
    w_d_hat = linalg.pinv(core) @ k_mat[sel.selected, :] @ g.w_d
    compressed = FfnGroup(
        w_x=g.w_x[:, sel.selected],
        w_g=g.w_g[:, sel.selected],
        w_d=w_d_hat,
        gate_kind=g.gate_kind,
    )
    predicted = linalg.nystrom_residual(k_mat, sel)
    return CompressedGroup("ffn", compressed, k, predicted, g, selection=sel)


def _resolve(compressed):
    return compressed.group if isinstance(compressed, CompressedGroup) else compressed


def reconstruction_loss(original, compressed, inputs, key_inputs=None) -> float:
    """Squared-Frobenius functional deviation on an activation batch.

    Evaluated per module kind: the bilinear logit form for query-key
    groups (summed over heads), the linear composite for value-output, and
    the gated map for feed-forward. For cross-attention groups,
    ``key_inputs`` carries the batch feeding the key/value side (defaults
    to ``inputs``).
    """
    comp = _resolve(compressed)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("inputs must be a (rows, dim) batch")
    y = x if key_inputs is None else np.asarray(key_inputs, dtype=np.float64)

    if isinstance(original, QkGroup):
        if x.shape[1] != original.w_q.shape[0] or y.shape[1] != original.w_k.shape[0]:
            raise ShapeError("batch dims incompatible with q/k weights")
        loss = 0.0
        for j in range(original.heads):
            wq_j, wk_j = original.head(j)
            cq_j, ck_j = comp.head(j)
            delta = (x @ wq_j) @ (y @ wk_j).T - (x @ cq_j) @ (y @ ck_j).T
            loss += float(np.sum(delta * delta))
        return loss

    if isinstance(original, VoGroup):
        if y.shape[1] != original.w_v.shape[0]:
            raise ShapeError("batch dim incompatible with value weights")
        loss = 0.0
        for j in range(original.heads):
            wv_j, wo_j = original.head(j)
            cv_j, co_j = comp.head(j)
            delta = y @ wv_j @ wo_j - y @ cv_j @ co_j
            loss += float(np.sum(delta * delta))
        return loss

    if isinstance(original, FfnGroup):
        if x.shape[1] != original.w_x.shape[0]:
            raise ShapeError("batch dim incompatible with ffn weights")
        delta = original.intermediate(x) @ original.w_d - comp.intermediate(x) @ comp.w_d
        return float(np.sum(delta * delta))

    raise ShapeError(f"unsupported group type {type(original).__name__}")
