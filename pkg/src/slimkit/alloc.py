"""Budgeted rank allocation from per-block influence scores.

Sparsity is distributed by the closed-form solution of an
entropy-regularized surrogate (an exponential softmax in the negative
scores), mapped to hardware-friendly ranks, and driven to a global
parameter budget by bisection on the mean sparsity plus a greedy refill of
the rounding slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetInfeasible, ConfigError

FAMILIES = ("qk", "vo", "ffn")


@dataclass
class BlockProfile:
    block_id: str
    family: str
    score: float
    d_eff: int
    cost_slope: float
    cost_offset: float = 0.0
    family_offset: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.cost_slope <= 0.0:
            raise ConfigError("cost slope must be positive")
        if self.d_eff < 1:
            raise ConfigError("effective width must be positive")

    @property
    def effective_score(self) -> float:
        return self.score + self.family_offset

    def cost(self, rank: int) -> float:
        return self.cost_slope * rank + self.cost_offset


@dataclass
class AllocationProblem:
    blocks: list[BlockProfile]
    budget: float
    epsilon: float | None = None  # default: 0.05 * stddev of scores
    r_min: int = 8
    rounding_multiple: int = 8

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("allocation problem needs at least one block")
        if self.r_min < 1 or self.rounding_multiple < 1:
            raise ConfigError("r_min and rounding_multiple must be >= 1")
        for b in self.blocks:
            if b.d_eff < self.r_min:
                raise ConfigError(
                    f"block {b.block_id}: width {b.d_eff} below r_min {self.r_min}"
                )


@dataclass
class BlockAllocation:
    block_id: str
    family: str
    d_eff: int
    rank: int
    retention: float
    sparsity: float
    cost: float


@dataclass
class AllocationPlan:
    blocks: list[BlockAllocation]
    budget: float
    total_cost: float
    mean_sparsity: float
    phi_bar: float

    def rank_of(self) -> dict[str, int]:
        return {b.block_id: b.rank for b in self.blocks}

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "total_cost": self.total_cost,
            "mean_sparsity": self.mean_sparsity,
            "phi_bar": self.phi_bar,
            "blocks": [
                {
                    "block_id": b.block_id,
                    "family": b.family,
                    "d_eff": b.d_eff,
                    "rank": b.rank,
                    "retention": b.retention,
                    "sparsity": b.sparsity,
                    "cost": b.cost,
                }
                for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationPlan":
        return cls(
            blocks=[BlockAllocation(**b) for b in d["blocks"]],
            budget=d["budget"],
            total_cost=d["total_cost"],
            mean_sparsity=d["mean_sparsity"],
            phi_bar=d["phi_bar"],
        )


def resolve_epsilon(blocks: list[BlockProfile], epsilon: float | None) -> float:
    """Temperature default: 0.05 x score spread, so allocation sensitivity
    does not depend on the score scale. Zero spread degenerates to uniform."""
    if epsilon is not None:
        if epsilon <= 0.0:
            raise ConfigError("temperature epsilon must be positive")
        return epsilon
    spread = float(np.std([b.effective_score for b in blocks]))
    return 0.05 * spread if spread > 0.0 else 0.0


def softmax_sparsity(
    blocks: list[BlockProfile], phi_bar: float, epsilon: float | None = None
) -> dict[str, float]:
    """Closed-form sparsity split: phi proportional to exp(-score/epsilon).

    The mean of the returned sparsities equals phi_bar. Values above 1 are
    clamped with their excess redistributed proportionally among the
    unclamped blocks, iterated until feasible.
    """
    if not (0.0 <= phi_bar <= 1.0):
        raise ConfigError(f"phi_bar {phi_bar} outside [0, 1]")
    eps = resolve_epsilon(blocks, epsilon)
    scores = np.array([b.effective_score for b in blocks], dtype=np.float64)
    n = len(blocks)
    if eps == 0.0:
        phi = np.full(n, phi_bar)
    else:
        z = -scores / eps
        z -= z.max()
        e = np.exp(z)
        phi = n * phi_bar * e / e.sum()
    # clamp-and-redistribute until every sparsity fits in [0, 1]
    clamped = np.zeros(n, dtype=bool)
    for _ in range(n + 1):
        over = phi > 1.0
        if not np.any(over):
            break
        excess = float(np.sum(phi[over] - 1.0))
        phi[over] = 1.0
        clamped |= over
        free = ~clamped
        mass = float(phi[free].sum()) if np.any(free) else 0.0
        if mass <= 0.0:
            if excess > 1e-12:
                raise BudgetInfeasible(
                    f"mean sparsity {phi_bar} cannot be met with clamped blocks"
                )
            break
        phi[free] += excess * phi[free] / mass
    return {b.block_id: float(p) for b, p in zip(blocks, phi)}


def map_ranks(
    phi: dict[str, float],
    blocks: list[BlockProfile],
    r_min: int = 8,
    multiple: int = 8,
) -> dict[str, int]:
    """Retention fractions to ranks: round-half-up to the nearest multiple,
    floored at r_min and capped at the block width."""
    ranks = {}
    for b in blocks:
        rho = 1.0 - phi[b.block_id]
        rounded = multiple * math.floor((rho * b.d_eff + multiple / 2.0) / multiple)
        ranks[b.block_id] = min(b.d_eff, max(r_min, rounded))
    return ranks


def _plan_cost(blocks: list[BlockProfile], ranks: dict[str, int]) -> float:
    return sum(b.cost(ranks[b.block_id]) for b in blocks)


def bisect_budget(problem: AllocationProblem) -> AllocationPlan:
    """Find the mean sparsity whose rank mapping meets the budget, then
    spend rounding slack greedily on the highest-score blocks.

    The plan is deterministic; at exit no single block can gain one more
    rounding step without exceeding the budget or its width cap.
    """
    blocks = problem.blocks
    eps = resolve_epsilon(blocks, problem.epsilon)
    r_min, mult = problem.r_min, problem.rounding_multiple
    min_cost = sum(b.cost(r_min) for b in blocks)
    if problem.budget < min_cost:
        raise BudgetInfeasible(
            f"budget {problem.budget:.0f} below minimum feasible cost {min_cost:.0f}"
        )

    def ranks_at(phi_bar: float) -> dict[str, int]:
        return map_ranks(softmax_sparsity(blocks, phi_bar, eps or None), blocks, r_min, mult)

    if _plan_cost(blocks, ranks_at(0.0)) <= problem.budget:
        phi_bar = 0.0
    else:
        lo, hi = 0.0, 1.0
        while hi - lo > 1e-6:
            mid = 0.5 * (lo + hi)
            if _plan_cost(blocks, ranks_at(mid)) <= problem.budget:
                hi = mid
            else:
                lo = mid
        phi_bar = hi
    ranks = ranks_at(phi_bar)
    total = _plan_cost(blocks, ranks)

    # greedy refill of rounding slack, most influential blocks first
    order = sorted(range(len(blocks)), key=lambda i: (-blocks[i].effective_score, i))
    changed = True
    while changed:
        changed = False
        for i in order:
            b = blocks[i]
            r = ranks[b.block_id]
            if r >= b.d_eff:
                continue
            bump = min(r + mult, b.d_eff)
            delta = b.cost_slope * (bump - r)
            if total + delta <= problem.budget:
                ranks[b.block_id] = bump
                total += delta
                changed = True

    allocations = []
    for b in blocks:
        r = ranks[b.block_id]
        rho = r / b.d_eff
        allocations.append(
            BlockAllocation(
                block_id=b.block_id,
                family=b.family,
                d_eff=b.d_eff,
                rank=r,
                retention=rho,
                sparsity=1.0 - rho,
                cost=b.cost(r),
            )
        )
    return AllocationPlan(
        blocks=allocations,
        budget=problem.budget,
        total_cost=total,
        mean_sparsity=float(np.mean([a.sparsity for a in allocations])),
        phi_bar=phi_bar,
    )


def format_plan(plan: AllocationPlan) -> str:
    """Fixed-width text table of the plan (block rows plus totals)."""
    lines = [
        f"{'block':<24} {'family':<6} {'d_eff':>6} {'rank':>6} "
        f"{'retain':>8} {'sparsity':>9} {'cost':>12}"
    ]
    for b in plan.blocks:
        lines.append(
            f"{b.block_id:<24} {b.family:<6} {b.d_eff:>6d} {b.rank:>6d} "
            f"{b.retention:>8.4f} {b.sparsity:>9.4f} {b.cost:>12.0f}"
        )
    lines.append(
        f"{'TOTAL':<24} {'':<6} {'':>6} {'':>6} {'':>8} "
        f"{plan.mean_sparsity:>9.4f} {plan.total_cost:>12.0f}"
    )
    lines.append(f"budget {plan.budget:.0f}  phi_bar {plan.phi_bar:.6f}")
    return "\n".join(lines)
