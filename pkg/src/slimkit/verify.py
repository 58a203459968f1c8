"""Seeded self-checking property suites.

Each check regenerates its own random instances from a base seed, compares
the library's closed forms against independent oracles (least squares,
exhaustive subset enumeration, projected gradient descent, direct loss
evaluation), and reports the first failing seed. The CLI `verify`
subcommand maps any failure to exit code 1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import alloc, linalg, madac
from .calib import MixedCorrelation, trq_score


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# shared instance generators


def _spd(rng, n, cond=30.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    w = np.geomspace(1.0, 1.0 / cond, n)
    return (q * w) @ q.T


def _batch_matching(rng, c, rows):
    """Batch whose second moment x^T x equals c exactly."""
    q, _ = np.linalg.qr(rng.normal(size=(rows, c.shape[0])))
    return q @ linalg.psd_sqrt(c)


def _attention_instance(rng):
    d = int(rng.choice([4, 8, 12, 16]))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0 and d // h >= 2]))
    d_h = d // heads
    r = int(rng.integers(1, d_h))
    return d, heads, r


# ---------------------------------------------------------------------------
# projected-gradient oracle for the allocation surrogate


def _project_metric(y, dinv, phi_bar, lo=1e-15, hi=1.0):
    """Projection onto {mean(x) = phi_bar} in the metric diag(1/dinv) with a
    box: x_i = clip(y_i - lam * dinv_i); the mean is monotone in lam, so the
    multiplier is found by bisection."""
    a, b = -1e12, 1e12
    for _ in range(200):
        lam = 0.5 * (a + b)
        if np.clip(y - lam * dinv, lo, hi).mean() > phi_bar:
            a = lam
        else:
            b = lam
    return np.clip(y - 0.5 * (a + b) * dinv, lo, hi)


def pgd_entropy_minimizer(scores, phi_bar, epsilon, iters=500, tol=1e-15):
    """Projected gradient descent on sum(s*phi + eps*phi*log(phi)).

    Independent numerical minimizer of the allocation surrogate under the
    mean-sparsity constraint, used as the oracle for the closed form. Steps
    are preconditioned by the inverse Hessian diagonal (eps/phi), which
    makes convergence insensitive to the spread of the solution.
    """
    s = np.asarray(scores, dtype=np.float64)
    lo = 1e-15
    phi = _project_metric(
        np.clip(np.full(len(s), phi_bar), lo, 1.0), np.ones(len(s)), phi_bar
    )
    for _ in range(iters):
        grad = s + epsilon * (1.0 + np.log(np.maximum(phi, lo)))
        dinv = 0.9 * phi / epsilon
        nxt = _project_metric(phi - dinv * grad, dinv, phi_bar)
        if np.abs(nxt - phi).max() < tol:
            return nxt
        phi = nxt
    return phi


# ---------------------------------------------------------------------------
# individual checks


def check_vo_equality(seeds: int, base_seed: int = 0) -> CheckResult:
    """Measured VO loss equals the whitened spectral tail (1e-6 relative)."""
    worst = 0.0
    for i in range(seeds):
        rng = np.random.default_rng([base_seed, 300, i])
        d, heads, r = _attention_instance(rng)
        g = madac.VoGroup(
            w_v=rng.normal(size=(d, d)) / np.sqrt(d),
            w_o=rng.normal(size=(d, d)) / np.sqrt(d),
            heads=heads,
            head_dim=d // heads,
        )
        c = _spd(rng, d)
        comp = madac.compress_vo(g, MixedCorrelation.from_matrix(c), r)
        x = _batch_matching(rng, c, max(2 * d, 32))
        measured = madac.reconstruction_loss(g, comp, x)
        rel = abs(measured - comp.predicted_error) / comp.predicted_error
        worst = max(worst, rel)
        if rel > 1e-6:
            return CheckResult(
                "vo_equality", False, f"seed {i}: relative gap {rel:.3e} > 1e-6"
            )
    return CheckResult(
        "vo_equality", True, f"{seeds} instances, worst relative gap {worst:.3e}"
    )


def check_qk_bound(
    seeds: int, base_seed: int = 0, break_whitening: bool = False
) -> CheckResult:
    """Measured QK loss within the spectral-tail bound; equality when H=1."""
    worst_excess, worst_eq = 0.0, 0.0
    for i in range(seeds):
        rng = np.random.default_rng([base_seed, 200, i])
        d, heads, r = _attention_instance(rng)
        g = madac.QkGroup(
            w_q=rng.normal(size=(d, d)) / np.sqrt(d),
            w_k=rng.normal(size=(d, d)) / np.sqrt(d),
            heads=heads,
            head_dim=d // heads,
        )
        c = _spd(rng, d)
        mixed = MixedCorrelation.from_matrix(c)
        whiten = MixedCorrelation.from_matrix(np.eye(d)) if break_whitening else mixed
        comp = madac.compress_qk(g, whiten, whiten, r)
        x = _batch_matching(rng, c, max(2 * d, 32))
        measured = madac.reconstruction_loss(g, comp, x)
        # bound uses the tail of the properly whitened composite
        bound = 0.0
        for j in range(g.heads):
            wq_j, wk_j = g.head(j)
            t = (mixed.r_bar @ wq_j) @ (mixed.r_bar @ wk_j).T
            bound += linalg.svd_truncate(t, r).tail_energy
        if measured > bound * (1.0 + 1e-6):
            return CheckResult(
                "qk_bound",
                False,
                f"seed {i}: measured {measured:.6e} exceeds bound {bound:.6e}",
            )
        worst_excess = max(worst_excess, measured / bound - 1.0)
        if heads == 1:
            rel = abs(measured - bound) / bound
            worst_eq = max(worst_eq, rel)
            if rel > 1e-6:
                return CheckResult(
                    "qk_bound", False, f"seed {i}: H=1 equality gap {rel:.3e} > 1e-6"
                )
    return CheckResult(
        "qk_bound",
        True,
        f"{seeds} instances within bound (worst excess {worst_excess:.3e}, "
        f"worst H=1 gap {worst_eq:.3e})",
    )


def check_ffn_closed_form(seeds: int, base_seed: int = 0) -> CheckResult:
    """Down-projection matches least squares; loss within the spectral bound."""
    for i in range(seeds):
        rng = np.random.default_rng([base_seed, 100, i])
        d = int(rng.integers(4, 9))
        d_int = int(rng.integers(max(6, d), 13))
        k = int(rng.integers(1, d_int))
        g = madac.FfnGroup(
            w_x=rng.normal(size=(d, d_int)) / np.sqrt(d),
            w_g=rng.normal(size=(d, d_int)) / np.sqrt(d),
            w_d=rng.normal(size=(d_int, d)) / np.sqrt(d_int),
            gate_kind=str(rng.choice(["gelu", "silu"])),
        )
        x = rng.normal(size=(64, d))
        z = g.intermediate(x)
        k_mat = z.T @ z
        comp = madac.compress_ffn(g, k_mat, k)
        z_sel = z[:, comp.selection.selected]
        oracle, *_ = np.linalg.lstsq(z_sel, z @ g.w_d, rcond=None)
        gap = float(np.abs(comp.group.w_d - oracle).max())
        if gap > 1e-8:
            return CheckResult(
                "ffn_closed_form", False, f"seed {i}: lstsq gap {gap:.3e} > 1e-8"
            )
        measured = madac.reconstruction_loss(g, comp, x)
        bound = (
            np.linalg.norm(g.w_d, 2) ** 2
            * np.linalg.norm(np.linalg.inv(k_mat), 2)
            * comp.predicted_error**2
        )
        if measured > bound + 1e-8:
            return CheckResult(
                "ffn_closed_form",
                False,
                f"seed {i}: loss {measured:.6e} above bound {bound:.6e}",
            )
    return CheckResult(
        "ffn_closed_form", True, f"{seeds} instances match lstsq and the error bound"
    )


def check_cpqr_quality(instances: int = 100, base_seed: int = 0) -> CheckResult:
    """CPQR columns within 10x the exhaustive-best subset on >=95% of runs."""
    good = 0
    for i in range(instances):
        rng = np.random.default_rng([base_seed, 400, i])
        n = int(rng.integers(5, 11))
        k = int(rng.integers(2, min(n, 5)))
        k_mat = _spd(rng, n, cond=float(rng.uniform(10.0, 1000.0)))
        sel = linalg.cpqr_select(k_mat, k)
        err = linalg.nystrom_residual(k_mat, sel)
        best = min(
            linalg.nystrom_residual(k_mat, linalg.ColumnSelection(n, list(sub)))
            for sub in itertools.combinations(range(n), k)
        )
        if err <= 10.0 * best or best == 0.0:
            good += 1
    frac = good / instances
    passed = frac >= 0.95
    return CheckResult(
        "cpqr_quality", passed, f"{good}/{instances} within 10x exhaustive best"
    )


def check_allocation(instances: int = 20, base_seed: int = 0) -> CheckResult:
    """Closed-form softmax vs PGD oracle, budget targeting, monotonicity."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([base_seed, 500, i])
        n = int(rng.integers(3, 13))
        scores = rng.uniform(0.0, 1.0, n)
        eps = float(rng.uniform(0.05, 0.5))
        phi_bar = float(rng.uniform(0.05, 0.6))
        blocks = [
            alloc.BlockProfile(f"b{j}", "qk", float(scores[j]), 64, 128.0)
            for j in range(n)
        ]
        phi = alloc.softmax_sparsity(blocks, phi_bar, eps)
        values = np.array([phi[b.block_id] for b in blocks])
        # monotone influence: higher score -> no more sparsity
        order = np.argsort(-scores)
        mono = np.all(np.diff(values[order]) >= -1e-12)
        if not mono:
            return CheckResult("allocation", False, f"seed {i}: monotonicity violated")
        if values.max() < 1.0:  # no-clamp case: compare against the oracle
            oracle = pgd_entropy_minimizer(scores, phi_bar, eps)
            gap = float(np.abs(values - oracle).max())
            worst = max(worst, gap)
            if gap > 1e-6:
                return CheckResult(
                    "allocation", False, f"seed {i}: oracle gap {gap:.3e} > 1e-6"
                )
        if abs(values.mean() - phi_bar) > 1e-12:
            return CheckResult(
                "allocation", False, f"seed {i}: mean sparsity not preserved"
            )
    # budget targeting on the 12-block problem at the reference ratio
    for i in range(instances):
        problem = reference_block_problem(0.76 / 1.04, seed=base_seed + i)
        plan = alloc.bisect_budget(problem)
        slack = problem.budget - plan.total_cost
        max_step = max(b.cost_slope for b in problem.blocks) * problem.rounding_multiple
        if not (0.0 <= slack < max_step):
            return CheckResult(
                "allocation",
                False,
                f"budget seed {i}: slack {slack:.0f} outside one rounding step",
            )
        by_id = {b.block_id: b for b in problem.blocks}
        for a in plan.blocks:
            for b in plan.blocks:
                pa, pb = by_id[a.block_id], by_id[b.block_id]
                if (
                    pa.d_eff == pb.d_eff
                    and pa.cost_slope == pb.cost_slope
                    and pa.effective_score > pb.effective_score
                ):
                    if a.retention < b.retention - 1e-12:
                        return CheckResult(
                            "allocation",
                            False,
                            f"budget seed {i}: {a.block_id} out-ranked by {b.block_id}",
                        )
    return CheckResult(
        "allocation",
        True,
        f"{instances} softmax instances (worst oracle gap {worst:.3e}) "
        f"and {instances} budget plans",
    )


def check_trq(draws: int = 1000, base_seed: int = 0) -> CheckResult:
    """Scale/variance invariance to 1e-12, [0,1] bounds, exact isotropic value."""
    rng = np.random.default_rng([base_seed, 600])
    worst = 0.0
    for i in range(draws):
        d = int(rng.integers(2, 12))
        w = rng.normal(size=(d, int(rng.integers(1, 10))))
        c = rng.normal(size=(d, d))
        c = c @ c.T
        alpha = float(rng.uniform(0.05, 20.0))
        beta = float(rng.uniform(0.05, 20.0))
        v = trq_score(w, c)
        if not (0.0 <= v <= 1.0):
            return CheckResult("trq", False, f"draw {i}: score {v} outside [0,1]")
        gap = abs(trq_score(alpha * w, beta * c) - v)
        worst = max(worst, gap)
        if gap > 1e-12:
            return CheckResult(
                "trq", False, f"draw {i}: invariance gap {gap:.3e} > 1e-12"
            )
    for d in (2, 3, 5, 8, 16):
        w = rng.normal(size=(d, d))
        if trq_score(w, np.eye(d)) != 1.0 / d:
            return CheckResult("trq", False, f"isotropic case d={d} not exactly 1/d")
    return CheckResult(
        "trq", True, f"{draws} draws, worst invariance gap {worst:.3e}"
    )


def reference_block_problem(budget_ratio: float, seed: int = 0) -> alloc.AllocationProblem:
    """Synthetic 12-block allocation problem sized to common U-Net widths.

    Three channel widths, each contributing self-attention qk/vo, a
    cross-attention qk (text width 768), and a gated FFN block.
    """
    rng = np.random.default_rng([seed, 700])
    heads, d_text = 8, 768
    blocks = []
    for d in (320, 640, 1280):
        d_h = d // heads
        d_int = 4 * d
        for name, family, d_eff, slope in [
            (f"w{d}.sa.qk", "qk", d_h, 2.0 * d * heads),
            (f"w{d}.sa.vo", "vo", d_h, 2.0 * d * heads),
            (f"w{d}.ca.qk", "qk", d_h, (d + d_text) * heads),
            (f"w{d}.ffn", "ffn", d_int, 3.0 * d),
        ]:
            blocks.append(
                alloc.BlockProfile(
                    name, family, float(rng.uniform(0.05, 0.9)), d_eff, slope
                )
            )
    full_cost = sum(b.cost(b.d_eff) for b in blocks)
    return alloc.AllocationProblem(blocks=blocks, budget=budget_ratio * full_cost)


THEOREM_CHECKS = ("ffn_closed_form", "qk_bound", "vo_equality")


def run_suites(
    seeds: int = 50, base_seed: int = 0, break_whitening: bool = False
) -> list[CheckResult]:
    """The closed-form and allocation oracle suites run by `verify`."""
    return [
        check_ffn_closed_form(seeds, base_seed),
        check_qk_bound(seeds, base_seed, break_whitening=break_whitening),
        check_vo_equality(seeds, base_seed),
        check_cpqr_quality(max(seeds, 100), base_seed),
        check_allocation(max(seeds // 2, 10), base_seed),
        check_trq(1000, base_seed),
    ]
