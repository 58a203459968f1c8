"""Dense linear-algebra kernels used by every other module.

Matrices are plain 2-D float64 ndarrays (row-major). Bundles on disk store
f32, but everything here computes in f64: whitening and inversion amplify
rounding, so narrowing happens only at the I/O boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidMatrix, NotSymmetric, RankOutOfRange

__all__ = [
    "SvdResult",
    "ColumnSelection",
    "svd_truncate",
    "cpqr_select",
    "psd_sqrt",
    "psd_inv_sqrt",
    "psd_roots",
    "pinv",
    "nystrom_residual",
    "default_inv_sqrt_floor",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise InvalidMatrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidMatrix(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size == 0:
        raise InvalidMatrix(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix(f"{name} contains non-finite entries")
    return a


def _check_symmetric(c: np.ndarray, name: str = "matrix") -> np.ndarray:
    tol = 1e-8 * max(1.0, float(np.abs(c).max()))
    if float(np.abs(c - c.T).max()) > tol:
        raise NotSymmetric(f"{name} is not symmetric within 1e-8")
    return 0.5 * (c + c.T)


@dataclass
class SvdResult:
    """Top-`rank` singular triplets of a matrix plus the discarded energy.

    ``u`` is m x r with orthonormal columns, ``v`` is n x r, and
    ``tail_energy`` is the sum of squared singular values beyond the cut,
    i.e. the squared Frobenius error of the rank-r truncation.
    """

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray
    tail_energy: float

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


@dataclass
class ColumnSelection:
    """Ordered, duplicate-free column indices into a source dimension."""

    source_dim: int
    selected: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.selected) < 1:
            raise RankOutOfRange("selection must contain at least one column")
        if len(set(self.selected)) != len(self.selected):
            raise InvalidMatrix("selection contains duplicate indices")
        if any(j < 0 or j >= self.source_dim for j in self.selected):
            raise InvalidMatrix("selection index out of range")

    def __len__(self) -> int:
        return len(self.selected)

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Extract the selected columns of ``a`` in selection order."""
        return np.asarray(a)[:, self.selected]

    def matrix(self) -> np.ndarray:
        """The explicit 0/1 selection matrix (source_dim x k)."""
        m = np.zeros((self.source_dim, len(self.selected)))
        m[self.selected, np.arange(len(self.selected))] = 1.0
        return m


def svd_truncate(a, rank: int) -> SvdResult:
    """Rank-truncated SVD with the discarded spectral energy.

    tail_energy equals ||a - u s v^T||_F^2 of the truncation (Eckart-Young).
    """
    a = as_matrix(a)
    if not (1 <= rank <= min(a.shape)):
        raise RankOutOfRange(f"rank {rank} not in [1, {min(a.shape)}]")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    tail = float(np.sum(s[rank:] ** 2))
    return SvdResult(
        u=u[:, :rank].copy(),
        singular_values=s[:rank].copy(),
        v=vt[:rank].T.copy(),
        tail_energy=tail,
    )


def cpqr_select(a, k: int) -> ColumnSelection:
    """First k pivot indices of column-pivoted Householder QR.

    Pivoting greedily takes the column with the largest residual norm;
    exact ties break toward the lowest column index, so the result is
    deterministic across platforms. Residual norms are recomputed fresh at
    every step (no downdating), which is robust and cheap at the sizes this
    library targets. Prefixes are nested: the first k pivots of a (n, k+1)
    call coincide with a (n, k) call.
    """
    a = as_matrix(a)
    m, n = a.shape
    if not (1 <= k <= n):
        raise RankOutOfRange(f"k {k} not in [1, {n}]")
    r = a.copy()
    piv = np.arange(n)
    steps = min(m, n)
    for j in range(steps):
        norms = np.einsum("ij,ij->j", r[j:, j:], r[j:, j:])
        jmax = j + int(np.argmax(norms))  # argmax returns the first maximum
        if jmax != j:
            r[:, [j, jmax]] = r[:, [jmax, j]]
            piv[[j, jmax]] = piv[[jmax, j]]
        # Householder reflection zeroing column j below the diagonal
        x = r[j:, j]
        alpha = np.linalg.norm(x)
        if alpha > 0.0:
            v = x.copy()
            v[0] += np.copysign(alpha, x[0] if x[0] != 0.0 else 1.0)
            vnorm2 = v @ v
            if vnorm2 > 0.0:
                r[j:, j:] -= np.outer(v, (2.0 / vnorm2) * (v @ r[j:, j:]))
    return ColumnSelection(source_dim=n, selected=[int(p) for p in piv[:k]])


def default_inv_sqrt_floor(c: np.ndarray) -> float:
    """Scale-relative eigenvalue floor for inverse roots: 1e-8 * trace/dim."""
    floor = 1e-8 * float(np.trace(c)) / c.shape[0]
    return floor if floor > 0.0 else 1e-12


def psd_roots(c, eps: float | None = None):
    """One eigendecomposition yielding (sqrt, inv_sqrt, min_eigenvalue).

    Eigenvalues are clamped at zero for the root and floored at ``eps``
    (default 1e-8 * trace/dim) before inversion, so the inverse root is
    always finite. Both outputs are exactly symmetric.
    """
    c = as_matrix(c)
    if c.shape[0] != c.shape[1]:
        raise InvalidMatrix("PSD root requires a square matrix")
    c = _check_symmetric(c)
    if eps is None:
        eps = default_inv_sqrt_floor(c)
    w, v = np.linalg.eigh(c)
    w_clamped = np.maximum(w, 0.0)
    root = (v * np.sqrt(w_clamped)) @ v.T
    inv_root = (v / np.sqrt(np.maximum(w_clamped, eps))) @ v.T
    return 0.5 * (root + root.T), 0.5 * (inv_root + inv_root.T), float(w[0])


def psd_sqrt(c) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    root, _, _ = psd_roots(c)
    return root


def psd_inv_sqrt(c, eps: float | None = None) -> np.ndarray:
    """Symmetric inverse PSD root with an eigenvalue floor (always finite)."""
    _, inv_root, _ = psd_roots(c, eps=eps)
    return inv_root


def pinv(a, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below rcond * sigma_max are treated as zero.
    """
    a = as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = rcond * (s[0] if s.size else 0.0)
    inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (vt.T * inv_s) @ u.T


def nystrom_residual(k_mat, selection: ColumnSelection) -> float:
    """Frobenius norm of K - K M (M^T K M)^+ M^T K for a column subset M."""
    k_mat = as_matrix(k_mat)
    cols = k_mat[:, selection.selected]
    core = k_mat[np.ix_(selection.selected, selection.selected)]
    approx = cols @ pinv(core) @ cols.T
    return float(np.linalg.norm(k_mat - approx, "fro"))
