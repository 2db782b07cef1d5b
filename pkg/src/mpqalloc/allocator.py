"""Budgeted per-layer bit-width allocation.

Maximise

    sum_i b_i * c_i,   c_i = (theta_i + ... + theta_{L-1}) / (L - i)

subject to sum_i param_count_i * b_i <= budget_bits, with every free layer
choosing b_i from a candidate set B and pinned layers fixed.

Every layer's gain and cost are linear in b_i, so the problem is a
multiple-choice knapsack. Three solvers share one tie-breaking rule so they
are directly comparable: exhaustive enumeration (test oracle), an exact
dynamic program over the residual budget, and a ratio greedy for instances
too large to tabulate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, List, Sequence

import numpy as np

from .errors import Infeasible, InstanceTooLarge

log = logging.getLogger(__name__)

DEFAULT_BITS = (3, 4, 5, 6, 7, 8)
BRUTE_FORCE_LIMIT = 10**7
DP_CELL_LIMIT = 2 * 10**7
# Objectives closer than this (relative) count as ties and go to tie-breaking.
TIE_RTOL = 1e-12


def coefficients(theta) -> np.ndarray:
    """Per-layer objective weights c_i: mean of theta over layers i..L-1."""
    theta = np.asarray(theta, dtype=np.float64)
    L = theta.shape[0]
    suffix = np.cumsum(theta[::-1])[::-1]
    return suffix / np.arange(L, 0, -1)


def objective(bits, theta) -> float:
    bits = np.asarray(bits, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if bits.shape != theta.shape:
        raise ValueError(f"length mismatch: {bits.shape[0]} bits vs {theta.shape[0]} thetas")
    return float(np.dot(bits, coefficients(theta)))


def layer_size(param_count: int, bits: int) -> int:
    if param_count < 0 or bits < 0:
        raise ValueError("param_count and bits must be non-negative")
    return int(param_count) * int(bits)


@dataclass
class AllocationProblem:
    theta: np.ndarray
    param_counts: Sequence[int]
    budget_bits: int
    bit_choices: Sequence[int] = DEFAULT_BITS
    pinned: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.param_counts = [int(p) for p in self.param_counts]
        self.bit_choices = tuple(sorted(set(int(b) for b in self.bit_choices)))
        self.pinned = {int(k): int(v) for k, v in self.pinned.items()}
        self.budget_bits = int(self.budget_bits)
        self.validate()

    @property
    def num_layers(self) -> int:
        return len(self.param_counts)

    @property
    def free_layers(self) -> List[int]:
        return [i for i in range(self.num_layers) if i not in self.pinned]

    def pinned_size(self) -> int:
        return sum(layer_size(self.param_counts[i], b) for i, b in self.pinned.items())

    def min_size(self) -> int:
        lo = self.bit_choices[0]
        return self.pinned_size() + sum(layer_size(self.param_counts[i], lo) for i in self.free_layers)

    def max_size(self) -> int:
        hi = self.bit_choices[-1]
        return self.pinned_size() + sum(layer_size(self.param_counts[i], hi) for i in self.free_layers)

    def validate(self) -> None:
        L = self.num_layers
        if self.theta.shape != (L,):
            raise ValueError(f"theta has {self.theta.shape[0]} entries for {L} layers")
        if not np.all(np.isfinite(self.theta)) or np.any(self.theta <= 0):
            raise ValueError("theta must be positive and finite")
        if any(p < 0 for p in self.param_counts):
            raise ValueError("param_counts must be non-negative")
        if not self.bit_choices:
            raise ValueError("bit_choices must be nonempty")
        if self.bit_choices[0] < 1 or self.bit_choices[-1] > 32:
            raise ValueError("bit_choices must lie in [1, 32]")
        for i, b in self.pinned.items():
            if not 0 <= i < L:
                raise ValueError(f"pinned layer {i} out of range")
            if not 1 <= b <= 32:
                raise ValueError(f"pinned bits for layer {i} must lie in [1, 32]")
        if self.budget_bits <= 0:
            raise ValueError("budget_bits must be positive")
        if self.pinned_size() > self.budget_bits:
            raise Infeasible(
                f"pinned layers alone need {self.pinned_size()} bits, budget is {self.budget_bits}",
                min_bits=self.min_size(),
            )

    def check_feasible(self) -> None:
        need = self.min_size()
        if need > self.budget_bits:
            raise Infeasible(
                f"budget of {self.budget_bits} bits is infeasible; minimum achievable size is "
                f"{need} bits ({need / 8e6:.6g} Mb)",
                min_bits=need,
            )


@dataclass
class BitAllocation:
    bits: List[int]
    objective_value: float
    used_bits: int
    solver: str

    def to_dict(self, problem: AllocationProblem, names=None) -> dict:
        L = problem.num_layers
        names = names or [f"layer{i}" for i in range(L)]
        c = coefficients(problem.theta)
        return {
            "layers": [
                {
                    "layer_id": i,
                    "name": names[i],
                    "param_count": problem.param_counts[i],
                    "theta": float(problem.theta[i]),
                    "coefficient": float(c[i]),
                    "bits": self.bits[i],
                    "pinned": i in problem.pinned,
                    "size_bits": layer_size(problem.param_counts[i], self.bits[i]),
                }
                for i in range(L)
            ],
            "totals": {
                "used_bits": self.used_bits,
                "budget_bits": problem.budget_bits,
                "objective_value": self.objective_value,
                "solver": self.solver,
            },
        }


def _finish(problem: AllocationProblem, bits: Sequence[int], solver: str) -> BitAllocation:
    bits = [int(b) for b in bits]
    used = sum(layer_size(p, b) for p, b in zip(problem.param_counts, bits))
    if used > problem.budget_bits:
        raise AssertionError(f"{solver} produced an over-budget allocation")
    return BitAllocation(bits, objective(bits, problem.theta), used, solver)


def _tie_tol(c_free: np.ndarray, span: int) -> float:
    scale = float(np.sum(np.abs(c_free))) * max(span, 1)
    return TIE_RTOL * max(scale, np.finfo(float).tiny)


def _assemble(problem: AllocationProblem, free_bits: Sequence[int]) -> List[int]:
    bits = [0] * problem.num_layers
    for i, b in problem.pinned.items():
        bits[i] = b
    for i, b in zip(problem.free_layers, free_bits):
        bits[i] = int(b)
    return bits


def solve_brute_force(problem: AllocationProblem, chunk: int = 1 << 16) -> BitAllocation:
    """Enumerate B^free; among (near-)ties keep the lexicographically largest bits."""
    problem.check_feasible()
    free = problem.free_layers
    B = np.asarray(problem.bit_choices, dtype=np.int64)
    nb, m = len(B), len(free)
    total = nb**m
    if total > BRUTE_FORCE_LIMIT:
        raise InstanceTooLarge(f"{total} assignments exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    c = coefficients(problem.theta)[free]
    p = np.asarray([problem.param_counts[i] for i in free], dtype=np.int64)
    capacity = problem.budget_bits - problem.pinned_size()
    # Layer 0 is the most significant digit, so enumeration index order is
    # lexicographic order of the bit vectors.
    radix = nb ** np.arange(m - 1, -1, -1, dtype=np.int64)

    def scan():
        for start in range(0, total, chunk):
            idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
            digits = (idx[:, None] // radix[None, :]) % nb
            vals = B[digits]
            cost = vals @ p
            gain = vals.astype(np.float64) @ c
            gain[cost > capacity] = -np.inf
            yield idx, gain

    best = max(float(g.max()) for _, g in scan())
    tol = _tie_tol(c, int(B[-1]))
    pick = -1
    for idx, gain in scan():
        hits = np.nonzero(gain >= best - tol)[0]
        if hits.size:
            pick = int(idx[hits[-1]])
    digits = (pick // radix) % nb
    return _finish(problem, _assemble(problem, B[digits]), "brute_force")


def solve_dp(problem: AllocationProblem) -> BitAllocation:
    """Exact multiple-choice knapsack DP over the residual budget.

    Every free layer is first charged min(B); each choice then costs
    p_i * (b - min B) and gains c_i * (b - min B). Costs are divided by
    their gcd before tabulating.
    """
    problem.check_feasible()
    free = problem.free_layers
    B = problem.bit_choices
    lo = B[0]
    c = coefficients(problem.theta)[free]
    p = [problem.param_counts[i] for i in free]
    m = len(free)
    if m == 0:
        return _finish(problem, _assemble(problem, []), "dp")

    costs = [[pk * (b - lo) for b in B] for pk in p]
    nonzero = [x for row in costs for x in row if x > 0]
    g = reduce(math.gcd, nonzero, 0) or 1
    residual = problem.budget_bits - problem.min_size()
    cap = min(residual, sum(row[-1] for row in costs)) // g
    if (cap + 1) * (m + 1) > DP_CELL_LIMIT:
        raise InstanceTooLarge(
            f"DP table of {(cap + 1) * (m + 1)} cells exceeds {DP_CELL_LIMIT}; use the greedy solver"
        )
    units = [[x // g for x in row] for row in costs]
    gains = [[ck * (b - lo) for b in B] for ck in c]

    # V[k][r]: best gain from free layers k.. with r residual units.
    V = np.full((m + 1, cap + 1), -np.inf)
    V[m] = 0.0
    for k in range(m - 1, -1, -1):
        row = V[k]
        nxt = V[k + 1]
        for u, gk in zip(units[k], gains[k]):
            if u > cap:
                continue
            cand = gk + nxt[: cap + 1 - u]
            np.maximum(row[u:], cand, out=row[u:])

    tol = _tie_tol(c, B[-1] - lo)
    r = cap
    chosen = []
    for k in range(m):
        target = V[k][r]
        for j in range(len(B) - 1, -1, -1):
            u = units[k][j]
            if u <= r and gains[k][j] + V[k + 1][r - u] >= target - tol:
                chosen.append(B[j])
                r -= u
                break
        else:
            raise AssertionError("DP reconstruction failed")
    return _finish(problem, _assemble(problem, chosen), "dp")


def solve_greedy(problem: AllocationProblem) -> BitAllocation:
    """Raise layers one step at a time in descending gain/cost ratio.

    A layer's ratio is c_i / p_i for every step, so layers are visited once
    in ratio order (ties by index) and raised while the next step fits.
    Exact when all free layers share one param_count and B is evenly spaced.
    """
    problem.check_feasible()
    free = problem.free_layers
    B = problem.bit_choices
    c = coefficients(problem.theta)
    remaining = problem.budget_bits - problem.min_size()

    def ratio(i):
        p = problem.param_counts[i]
        return math.inf if p == 0 else c[i] / p

    level = {i: 0 for i in free}
    for i in sorted(free, key=lambda i: (-ratio(i), i)):
        p = problem.param_counts[i]
        while level[i] + 1 < len(B):
            step = p * (B[level[i] + 1] - B[level[i]])
            if step > remaining:
                break
            remaining -= step
            level[i] += 1
    return _finish(problem, _assemble(problem, [B[level[i]] for i in free]), "greedy")


def solve(problem: AllocationProblem, method: str = "dp") -> BitAllocation:
    """Dispatch to a solver; "dp" falls back to greedy when the table is too large."""
    if method == "brute_force":
        return solve_brute_force(problem)
    if method == "greedy":
        return solve_greedy(problem)
    if method != "dp":
        raise ValueError(f"unknown solver {method!r}")
    try:
        return solve_dp(problem)
    except InstanceTooLarge as exc:
        log.warning("%s; falling back to greedy", exc)
        return solve_greedy(problem)


def uniform_allocation(problem: AllocationProblem, bits: int) -> List[int]:
    """Every free layer at ``bits``, pinned layers at their pinned width."""
    return _assemble(problem, [bits] * len(problem.free_layers))
