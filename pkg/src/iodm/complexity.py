"""Allocation programs for instance identification.

The central object is the linear program that picks nonnegative
per-decision play rates ``w`` minimising the regret-weighted total
``sum_pi w_pi * gap(f, pi)`` subject to one information constraint per
alternative instance ``g`` whose optimal decision differs from ``f``'s:

    sum_pi w_pi * KL(f[pi] || g[pi]) >= 1,       ||w||_inf <= n.

The program value is non-increasing in the cap ``n`` and may be
infeasible for small ``n``; infeasibility is a first-class result, not
an error.  Finite families are handled by constraint generation with an
exact separation scan, re-solving a small dense LP (two-phase simplex,
Bland's rule) as constraints accumulate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, HypothesisFamily, Instance, SolverError
from .divergences import kl_matrix
from .families import GaussianMabInstance, LinearBanditInstance

#: substitute for infinite KL entries inside the LP; any positive weight
#: at such a decision separates the alternative, and this keeps the
#: tableau free of non-finite arithmetic
KL_CLIP = 1e6

#: constraint-violation threshold used by the separation scan
VIOLATION_TOL = 1e-9

#: binding-constraint detection tolerance reported in allocations
BINDING_TOL = 1e-7


@dataclass
class Allocation:
    """Solution of the allocation program at one cap value."""

    weights: np.ndarray | None
    objective: float
    binding_alternatives: list
    n_cap: float
    feasible: bool
    iterations: int = 0
    dual_gap: float = 0.0
    metadata: dict = field(default_factory=dict)


@dataclass
class ComplexityCurve:
    """Program values across a schedule of caps; infeasible points are +inf."""

    points: list  # [(n, value)]
    limit_estimate: float


# ---------------------------------------------------------------------------
# dense two-phase simplex with Bland's rule
# ---------------------------------------------------------------------------

_PIVOT_TOL = 1e-11


def _pivot(T: np.ndarray, basis: list, row: int, col: int) -> None:
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and abs(T[i, col]) > 0.0:
            T[i] -= T[i, col] * T[row]
    basis[row] = col


def _simplex_phase(T: np.ndarray, basis: list, cost: np.ndarray, max_pivots: int) -> int:
    """Minimise ``cost`` over the tableau in place; returns pivots used."""
    m, ncols = T.shape
    n = ncols - 1
    pivots = 0
    while True:
        reduced = cost - cost[basis] @ T[:, :n]
        enter = -1
        for j in range(n):  # Bland: first improving index
            if reduced[j] < -_PIVOT_TOL:
                enter = j
                break
        if enter < 0:
            return pivots
        leave, best = -1, math.inf
        for i in range(m):
            if T[i, enter] > _PIVOT_TOL:
                ratio = T[i, n] / T[i, enter]
                if ratio < best - 1e-12 or (
                    abs(ratio - best) <= 1e-12 and (leave < 0 or basis[i] < basis[leave])
                ):
                    best, leave = ratio, i
        if leave < 0:
            raise SolverError("simplex detected an unbounded direction")
        _pivot(T, basis, leave, enter)
        pivots += 1
        if pivots > max_pivots:
            raise SolverError(f"simplex exceeded the pivot cap {max_pivots}")


def _solve_box_lp(c_obj: np.ndarray, A_ge: np.ndarray, cap: float, max_pivots: int):
    """min c@w  s.t.  A_ge @ w >= 1,  0 <= w <= cap.

    Returns (w, objective, dual_gap) or None when infeasible.  Solved in
    equality standard form with surplus, bound-slack, and phase-1
    artificial columns.
    """
    m1, k = A_ge.shape
    # row scaling for conditioning; b entries scale along
    scale = np.maximum(A_ge.max(axis=1), 1e-30)
    A = A_ge / scale[:, None]
    b1 = 1.0 / scale

    n_vars = k + m1 + k  # w, surplus, bound slacks
    m = m1 + k
    body = np.zeros((m, n_vars))
    body[:m1, :k] = A
    body[:m1, k : k + m1] = -np.eye(m1)
    body[m1:, :k] = np.eye(k)
    body[m1:, k + m1 :] = np.eye(k)
    b = np.concatenate([b1, np.full(k, cap)])

    # phase 1: artificials on the >= rows; bound rows start basic on slacks
    T = np.zeros((m, n_vars + m1 + 1))
    T[:, :n_vars] = body
    T[:m1, n_vars : n_vars + m1] = np.eye(m1)
    T[:, -1] = b
    basis = list(range(n_vars, n_vars + m1)) + list(range(k + m1, k + m1 + k))
    cost1 = np.zeros(n_vars + m1)
    cost1[n_vars:] = 1.0
    pivots = _simplex_phase(T, basis, cost1, max_pivots)
    if cost1[basis] @ T[:, -1] > 1e-9:
        return None

    # drive leftover zero-valued artificials out of the basis
    rows_to_drop = []
    for i in range(m):
        if basis[i] >= n_vars:
            pivot_col = next(
                (j for j in range(n_vars) if abs(T[i, j]) > _PIVOT_TOL), None
            )
            if pivot_col is None:
                rows_to_drop.append(i)
            else:
                _pivot(T, basis, i, pivot_col)
    if rows_to_drop:
        keep = [i for i in range(m) if i not in rows_to_drop]
        T = T[keep]
        basis = [basis[i] for i in keep]
        m = len(keep)

    T2 = np.hstack([T[:, :n_vars], T[:, -1:]])
    cost2 = np.zeros(n_vars)
    cost2[:k] = c_obj
    _simplex_phase(T2, basis, cost2, max_pivots - pivots)

    x = np.zeros(n_vars)
    for i, j in enumerate(basis):
        x[j] = T2[i, -1]
    w = np.clip(x[:k], 0.0, cap)
    objective = float(c_obj @ w)

    # duals from the final basis: y = B^-T c_B on the equality system
    B = body[np.ix_(range(m), basis)] if m == m1 + k else None
    if B is None:
        # rows were dropped as redundant; rebuild the reduced system
        B = body[:, basis]
    try:
        y = np.linalg.solve(B.T, cost2[basis])
        dual = float(y @ b[: len(y)]) if len(y) == len(b) else objective
    except np.linalg.LinAlgError:
        dual = objective
    dual_gap = abs(objective - dual)
    return w, objective, dual_gap


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _clipped_kl_rows(f: Instance, family: HypothesisFamily, alt_idx: np.ndarray) -> np.ndarray:
    key = ("kl_matrix", family.index_of(f))
    if key not in family._cache:
        family._cache[key] = kl_matrix(f, family)
    return np.minimum(family._cache[key][alt_idx], KL_CLIP)


def min_alternative_information(f: Instance, family: HypothesisFamily) -> float:
    """Smallest over alternatives of the all-decision KL sum.

    The program at cap ``n`` is feasible iff ``n`` times this quantity
    reaches 1, so ``1/min_alternative_information`` is the feasibility
    threshold.  Returns +inf when no alternative exists.
    """
    alt = family.alternatives(f)
    if len(alt) == 0:
        return math.inf
    K = _clipped_kl_rows(f, family, alt)
    return float(K.sum(axis=1).min())


def solve_complexity(
    f: Instance,
    family: HypothesisFamily,
    n: float,
    *,
    max_pivots: int = 10 ** 6,
    max_rounds: int = 1000,
) -> Allocation:
    """Solve the allocation program over a finite family by constraint generation."""
    if n <= 0:
        raise DomainError(f"cap must be positive, got {n}")
    family.index_of(f)  # membership check; raises DomainError when absent
    alt_idx = family.alternatives(f)
    k = f.num_decisions
    if len(alt_idx) == 0:
        return Allocation(
            weights=np.zeros(k),
            objective=0.0,
            binding_alternatives=[],
            n_cap=float(n),
            feasible=True,
        )

    K = _clipped_kl_rows(f, family, alt_idx)
    coverage = float(n) * K.sum(axis=1)
    if coverage.min() < 1.0 - VIOLATION_TOL:
        worst = int(np.argmin(coverage))
        return Allocation(
            weights=None,
            objective=math.inf,
            binding_alternatives=[],
            n_cap=float(n),
            feasible=False,
            metadata={"blocking_alternative": int(alt_idx[worst])},
        )

    gaps = f.gaps
    w = np.zeros(k)
    if isinstance(f, GaussianMabInstance) and n * f.min_gap ** 2 > 3.0:
        w = np.minimum(mab_closed_form_weights(gaps, n), n)

    active: list[int] = []
    iterations = 0
    dual_gap = 0.0
    while True:
        iterations += 1
        if iterations > max_rounds:
            raise SolverError("constraint generation failed to converge")
        scores = K @ w
        j = int(np.argmin(scores))
        if scores[j] >= 1.0 - VIOLATION_TOL:
            break
        if j in active:
            raise SolverError(
                f"constraint {j} re-violated after inclusion (residual {1 - scores[j]:.3g})"
            )
        active.append(j)
        solved = _solve_box_lp(gaps, K[active], float(n), max_pivots)
        if solved is None:  # subset infeasible implies the full program is too
            return Allocation(
                weights=None,
                objective=math.inf,
                binding_alternatives=[],
                n_cap=float(n),
                feasible=False,
                metadata={"blocking_alternative": int(alt_idx[j])},
            )
        w, _, dual_gap = solved

    residual = K @ w - 1.0
    binding = [int(alt_idx[i]) for i in np.nonzero(np.abs(residual) <= BINDING_TOL)[0]]
    return Allocation(
        weights=w,
        objective=float(gaps @ w),
        binding_alternatives=binding,
        n_cap=float(n),
        feasible=True,
        iterations=iterations,
        dual_gap=dual_gap,
        metadata={"active_constraints": [int(alt_idx[i]) for i in active]},
    )


def separation_oracle(f: Instance, family: HypothesisFamily, weights):
    """Most-violated alternative for a candidate allocation, if any.

    Returns ``(family_index, violation)`` for the alternative minimising
    the weighted KL when that minimum falls short of 1, else ``None``.
    Ties break toward the lowest family index.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise DomainError("allocation weights must be nonnegative")
    alt_idx = family.alternatives(f)
    if len(alt_idx) == 0:
        return None
    K = _clipped_kl_rows(f, family, alt_idx)
    pos = w > 0
    scores = K[:, pos] @ w[pos] if pos.any() else np.zeros(len(alt_idx))
    j = int(np.argmin(scores))
    if scores[j] < 1.0 - VIOLATION_TOL:
        return int(alt_idx[j]), float(1.0 - scores[j])
    return None


def complexity_curve(f: Instance, family: HypothesisFamily, n_schedule) -> ComplexityCurve:
    """Program values along an increasing cap schedule; asserts monotonicity."""
    schedule = [float(v) for v in n_schedule]
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise DomainError("cap schedule must be strictly increasing")
    points = []
    previous = math.inf
    for n in schedule:
        alloc = solve_complexity(f, family, n)
        value = alloc.objective if alloc.feasible else math.inf
        if value > previous + 1e-7:
            raise SolverError(
                f"program value increased along the cap schedule: {previous} -> {value} at n={n}"
            )
        points.append((n, value))
        previous = value
    return ComplexityCurve(points=points, limit_estimate=points[-1][1])


def mab_closed_form_weights(gaps, n: float) -> np.ndarray:
    """Feasible closed-form allocation for unit-Gaussian bandits.

    The unique zero-gap decision gets weight ``n``; each decision with
    gap ``D`` gets ``2n / (n D^2 - 3)``.  Requires ``n * D_min^2 > 3``
    so every denominator is positive.
    """
    gaps = np.asarray(gaps, dtype=float)
    zero = np.isclose(gaps, 0.0, atol=1e-12)
    if zero.sum() != 1:
        raise DomainError("gap vector must contain exactly one optimal (zero) entry")
    positive = gaps[~zero]
    if positive.size and n * positive.min() ** 2 <= 3.0:
        raise DomainError(
            f"cap {n} too small for minimum gap {positive.min()}: denominator nonpositive"
        )
    w = np.empty_like(gaps)
    w[zero] = n
    w[~zero] = 2.0 * n / (n * positive ** 2 - 3.0)
    return w


def linear_bandit_allocation(
    instance: LinearBanditInstance,
    n: float,
    *,
    max_iters: int = 200_000,
    violation_tol: float = 1e-6,
    objective_tol: float = 1e-8,
    window: int = 100,
) -> Allocation:
    """Allocation for linear bandits via the ellipsoidal constraint program.

    Minimises ``sum_x w_x * gap_x`` subject to, for every suboptimal
    action ``x``, ``||x* - x||^2_{H(w)^-1} <= gap_x^2 / 2`` with
    ``H(w) = sum_x w_x x x^T``.  Solved by projected subgradient descent
    on an exact-penalty objective with step size decaying as 1/k; the
    optimal action is pinned at the cap (zero cost, pure information).
    """
    if not isinstance(instance, LinearBanditInstance):
        raise DomainError("linear-bandit allocation requires a linear-bandit instance")
    if n <= 0:
        raise DomainError(f"cap must be positive, got {n}")
    X = instance.actions
    k, d = X.shape
    star = instance.optimal_decision
    sub = [i for i in range(k) if i != star]
    gaps = instance.gaps
    V = X[star][None, :] - X[sub]               # rows x* - x
    rhs = 0.5 * gaps[sub] ** 2

    floor = 1.0
    for restart in range(3):
        w = np.full(k, min(floor, n))
        w[star] = n
        rho = 10.0 * (float(gaps @ w) + 1.0)
        best_w, best_obj = None, math.inf
        prev_window_obj = math.inf
        eta0 = max(1.0, n / 100.0)
        try:
            for it in range(1, max_iters + 1):
                H = (X * w[:, None]).T @ X
                M = np.linalg.solve(H, V.T)      # (d, |sub|)
                q = np.einsum("ij,ji->i", V, M)  # ||x*-x||^2_{H^-1}
                viol = q - rhs
                max_viol = float(viol.max(initial=0.0))
                obj = float(gaps[sub] @ w[sub])
                if max_viol <= violation_tol and obj < best_obj:
                    best_obj, best_w = obj, w.copy()
                grad = gaps.copy()
                violated = viol > 0.0
                if violated.any():
                    rel = 1.0 / rhs[violated]
                    proj = X @ M[:, violated]        # (k, n_violated)
                    grad -= rho * (proj ** 2) @ rel
                w = np.clip(w - (eta0 / it) * grad, 0.0, n)
                w[star] = n
                if it % window == 0:
                    if (
                        best_w is not None
                        and max_viol <= violation_tol
                        and abs(prev_window_obj - best_obj)
                        <= objective_tol * max(1.0, abs(best_obj))
                    ):
                        break
                    prev_window_obj = best_obj
        except np.linalg.LinAlgError:
            floor *= 10.0
            continue
        if best_w is None:
            floor *= 10.0
            continue
        H = (X * best_w[:, None]).T @ X
        M = np.linalg.solve(H, V.T)
        residual = np.einsum("ij,ji->i", V, M) - rhs
        binding = [sub[i] for i in np.nonzero(np.abs(residual) <= 1e-4 * np.maximum(rhs, 1e-12))[0]]
        return Allocation(
            weights=best_w,
            objective=best_obj,
            binding_alternatives=binding,
            n_cap=float(n),
            feasible=True,
            iterations=it,
            metadata={"restarts": restart},
        )
    raise SolverError("linear-bandit allocation failed after 3 restarts")
