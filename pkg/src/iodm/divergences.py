"""KL and Renyi divergences between instances, per decision.

Closed forms are provided per family (unit-variance Gaussians,
Bernoulli, truncated Gaussians, and layered-MDP trajectory
distributions via dynamic programming over the chain structure),
together with an independent adaptive-Simpson quadrature oracle used to
cross-check the continuous closed forms.

Support mismatches yield an infinite KL sentinel rather than an error:
downstream allocation solvers treat such alternatives as separated by
any positive weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DomainError, HypothesisFamily, Instance, SolverError
from .families import (
    GaussianMabInstance,
    BernoulliMabInstance,
    LinearBanditInstance,
    TabularMdpInstance,
    TRUNC_LO,
    TRUNC_HI,
    tg_mass,
    tg_mean,
)


@dataclass(frozen=True)
class RenyiOrder:
    """Order parameter zeta in (0, 1); lambda = 1 - zeta is its complement."""

    zeta: float

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise DomainError(f"Renyi order zeta={self.zeta} outside (0, 1)")

    @property
    def lambda_(self) -> float:
        return 1.0 - self.zeta


def _as_zeta(order) -> float:
    zeta = order.zeta if isinstance(order, RenyiOrder) else float(order)
    if not 0.0 < zeta < 1.0:
        raise DomainError(f"Renyi order zeta={zeta} outside (0, 1)")
    return zeta


@dataclass
class DivergenceReport:
    """KL plus Renyi values at requested orders for one decision."""

    kl: float
    renyi_values: list  # [(zeta, value)] in increasing zeta order
    per_decision: dict | None = None


# ---------------------------------------------------------------------------
# scalar closed forms
# ---------------------------------------------------------------------------

def gaussian_kl(mu1, mu2) -> float:
    """KL between unit-variance Gaussians: squared mean shift over two."""
    d = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    return 0.5 * d * d


def gaussian_renyi(mu1, mu2, zeta) -> float:
    d = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    return 0.5 * zeta * d * d


def bernoulli_kl(p, q):
    """KL between Bernoulli(p) and Bernoulli(q); +inf on support mismatch."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
        t2 = np.where(p < 1.0, (1.0 - p) * (np.log1p(-p) - np.log1p(-q)), 0.0)
    return t1 + t2


def bernoulli_renyi(p, q, zeta):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mix = p ** zeta * q ** (1.0 - zeta) + (1.0 - p) ** zeta * (1.0 - q) ** (1.0 - zeta)
    with np.errstate(divide="ignore"):
        return np.log(mix) / (zeta - 1.0)


def truncated_gaussian_kl(mu1, mu2, lo=TRUNC_LO, hi=TRUNC_HI):
    """KL between two unit-variance Gaussians truncated to [lo, hi]."""
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    z1 = tg_mass(mu1, lo, hi)
    z2 = tg_mass(mu2, lo, hi)
    m1 = tg_mean(mu1, lo, hi)
    return np.log(z2 / z1) + (mu1 - mu2) * (m1 - 0.5 * (mu1 + mu2))


def truncated_gaussian_renyi(mu1, mu2, zeta, lo=TRUNC_LO, hi=TRUNC_HI):
    """Renyi divergence of order zeta between truncated unit Gaussians.

    The power mixture of the two truncated densities is itself a scaled
    Gaussian with mean ``zeta*mu1 + (1-zeta)*mu2``, so the defining
    integral reduces to Gaussian interval masses.
    """
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    mid = zeta * mu1 + (1.0 - zeta) * mu2
    log_integral = (
        np.log(tg_mass(mid, lo, hi))
        - 0.5 * zeta * (1.0 - zeta) * np.square(mu1 - mu2)
        - zeta * np.log(tg_mass(mu1, lo, hi))
        - (1.0 - zeta) * np.log(tg_mass(mu2, lo, hi))
    )
    return log_integral / (zeta - 1.0)


# ---------------------------------------------------------------------------
# tabular trajectory divergences
# ---------------------------------------------------------------------------

def _discrete_kl_row(pf: np.ndarray, pg: np.ndarray) -> float:
    mask = pf > 0.0
    if np.any(mask & (pg <= 0.0)):
        return math.inf
    return float(np.sum(pf[mask] * (np.log(pf[mask]) - np.log(pg[mask]))))


def _tabular_kl(f: TabularMdpInstance, g: TabularMdpInstance, decision: int) -> float:
    """Trajectory KL via the chain rule over layers, weighted by occupancy."""
    acts = f.policy_actions(decision)
    occ = f.occupancy(decision)
    total = 0.0
    for s in range(f.num_states):
        if occ[s] <= 0.0:
            continue
        a = acts[s]
        step = float(truncated_gaussian_kl(f.mu[s, a], g.mu[s, a]))
        if f._layer_of[s] < f.horizon - 1:
            nxt = f.layer_states(f._layer_of[s] + 1)
            step += _discrete_kl_row(f.p[s, a, nxt], g.p[s, a, nxt])
        if not math.isfinite(step):
            return math.inf
        total += occ[s] * step
    return total


def _tabular_renyi(f: TabularMdpInstance, g: TabularMdpInstance, decision: int, zeta: float) -> float:
    """Trajectory Renyi via a backward pass over the layered product structure.

    Each layer contributes a reward factor (closed-form truncated-Gaussian
    power integral) and a transition factor sum(pf^zeta * pg^(1-zeta)),
    so the defining integral factorises exactly along the chain.
    """
    acts = f.policy_actions(decision)
    H = f.horizon
    reward_factor = np.exp(
        (zeta - 1.0) * truncated_gaussian_renyi(f.mu, g.mu, zeta)
    )  # (S, A)
    values = np.array([reward_factor[s, acts[s]] for s in f.layer_states(H - 1)])
    for h in range(H - 2, -1, -1):
        cur = f.layer_states(h)
        nxt = f.layer_states(h + 1)
        new = np.empty(len(cur))
        for i, s in enumerate(cur):
            a = acts[s]
            with np.errstate(invalid="ignore"):
                trans = f.p[s, a, nxt] ** zeta * g.p[s, a, nxt] ** (1.0 - zeta)
            trans = np.nan_to_num(trans, nan=0.0)
            new[i] = reward_factor[s, a] * float(trans @ values)
        values = new
    integral = float(values[0])
    if integral <= 0.0:
        return math.inf
    return math.log(integral) / (zeta - 1.0)


# ---------------------------------------------------------------------------
# dispatch layer
# ---------------------------------------------------------------------------

def _require_compatible(f: Instance, g: Instance) -> None:
    if f.kind != g.kind or not f.compatible_with(g):
        raise DomainError(
            f"instances are not structurally compatible ({f.kind} vs {g.kind})"
        )


def kl(f: Instance, g: Instance, decision: int) -> float:
    """KL divergence between the observation distributions at one decision."""
    _require_compatible(f, g)
    d = f.check_decision(decision)
    if isinstance(f, GaussianMabInstance):
        return float(gaussian_kl(f.means[d], g.means[d]))
    if isinstance(f, BernoulliMabInstance):
        return float(bernoulli_kl(f.probs[d], g.probs[d]))
    if isinstance(f, LinearBanditInstance):
        return float(gaussian_kl(f.expected_rewards[d], g.expected_rewards[d]))
    if isinstance(f, TabularMdpInstance):
        return _tabular_kl(f, g, d)
    raise DomainError(f"no KL implementation for kind {f.kind!r}")


def renyi(f: Instance, g: Instance, decision: int, order) -> float:
    """Renyi divergence of order zeta in (0, 1) at one decision."""
    zeta = _as_zeta(order)
    _require_compatible(f, g)
    d = f.check_decision(decision)
    if isinstance(f, GaussianMabInstance):
        return float(gaussian_renyi(f.means[d], g.means[d], zeta))
    if isinstance(f, BernoulliMabInstance):
        return float(bernoulli_renyi(f.probs[d], g.probs[d], zeta))
    if isinstance(f, LinearBanditInstance):
        return float(gaussian_renyi(f.expected_rewards[d], g.expected_rewards[d], zeta))
    if isinstance(f, TabularMdpInstance):
        return _tabular_renyi(f, g, d, zeta)
    raise DomainError(f"no Renyi implementation for kind {f.kind!r}")


def kl_vector(f: Instance, g: Instance) -> np.ndarray:
    """KL at every decision, as a vector indexed by decision."""
    _require_compatible(f, g)
    if isinstance(f, GaussianMabInstance):
        return gaussian_kl(f.means, g.means)
    if isinstance(f, BernoulliMabInstance):
        return bernoulli_kl(f.probs, g.probs)
    if isinstance(f, LinearBanditInstance):
        return gaussian_kl(f.expected_rewards, g.expected_rewards)
    return np.array([kl(f, g, d) for d in range(f.num_decisions)])


def weighted_kl(f: Instance, g: Instance, weights) -> float:
    """Allocation-weighted KL: sum over decisions of w * KL.

    Zero weight contributes nothing even at an infinite-KL decision
    (no plays carry no information).
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (f.num_decisions,):
        raise DomainError(
            f"weight vector of shape {w.shape} does not index {f.num_decisions} decisions"
        )
    if np.any(w < 0):
        raise DomainError("allocation weights must be nonnegative")
    klv = kl_vector(f, g)
    terms = np.where(w > 0.0, w * klv, 0.0)
    return float(np.sum(terms))


def _stacked_params(family: HypothesisFamily) -> np.ndarray:
    """(|F|, |Pi|) matrix of per-decision means/probabilities for scalar kinds."""
    key = "stacked_params"
    if key not in family._cache:
        kind = family.kind
        if kind == "gaussian-mab":
            mat = np.vstack([g.means for g in family])
        elif kind == "bernoulli-mab":
            mat = np.vstack([g.probs for g in family])
        elif kind == "linear-bandit":
            mat = np.vstack([g.expected_rewards for g in family])
        else:
            raise DomainError(f"no stacked parameters for kind {kind!r}")
        family._cache[key] = mat
    return family._cache[key]


def kl_matrix(f: Instance, family: HypothesisFamily) -> np.ndarray:
    """(|F|, |Pi|) matrix of KL(f[pi] || g[pi]) over the whole family."""
    kind = family.kind
    if kind in ("gaussian-mab", "linear-bandit"):
        mat = _stacked_params(family)
        mu_f = f.means if kind == "gaussian-mab" else f.expected_rewards
        return gaussian_kl(mu_f[None, :], mat)
    if kind == "bernoulli-mab":
        mat = _stacked_params(family)
        return bernoulli_kl(f.probs[None, :], mat)
    return np.vstack([kl_vector(f, g) for g in family])


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------

def adaptive_simpson(func, a: float, b: float, tol: float = 1e-9, max_depth: int = 60) -> float:
    """Adaptive Simpson quadrature of a scalar function on [a, b]."""

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def recurse(x0, x2, f0, f1, f2, whole, eps, depth):
        x1 = 0.5 * (x0 + x2)
        lm, rm = 0.5 * (x0 + x1), 0.5 * (x1 + x2)
        flm, frm = func(lm), func(rm)
        left = simpson(x0, x1, f0, flm, f1)
        right = simpson(x1, x2, f1, frm, f2)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        half = 0.5 * eps
        return recurse(x0, x1, f0, flm, f1, left, half, depth + 1) + recurse(
            x1, x2, f1, frm, f2, right, half, depth + 1
        )

    fa, fm, fb = func(a), func(0.5 * (a + b)), func(b)
    if any(map(math.isnan, (fa, fm, fb))):
        raise SolverError("non-finite integrand in quadrature")
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, tol, 0)


def renyi_quadrature_oracle(log_density_p, log_density_q, support, order, tol: float = 1e-9) -> float:
    """Independent quadrature evaluation of the Renyi divergence.

    ``support`` must be a (lo, hi) pair of reals describing a continuous
    interval; discrete supports are rejected (closed sums handle those).
    """
    zeta = _as_zeta(order)
    if not (
        isinstance(support, tuple)
        and len(support) == 2
        and all(isinstance(v, (int, float)) for v in support)
    ):
        raise DomainError("quadrature oracle requires a continuous (lo, hi) support")
    lo, hi = float(support[0]), float(support[1])
    if not lo < hi:
        raise DomainError("support must satisfy lo < hi")

    def integrand(x):
        lp, lq = log_density_p(x), log_density_q(x)
        if math.isnan(lp) or math.isnan(lq):
            raise SolverError("non-finite integrand in quadrature")
        value = zeta * lp + (1.0 - zeta) * lq
        return math.exp(value) if value > -745.0 else 0.0

    integral = adaptive_simpson(integrand, lo, hi, tol=tol)
    if integral <= 0.0:
        return math.inf
    return math.log(integral) / (zeta - 1.0)


def divergence_report(f: Instance, g: Instance, decision: int, orders=(0.5, 0.9, 0.99)) -> DivergenceReport:
    """KL and Renyi values at one decision, with basic sanity checks."""
    kl_value = kl(f, g, decision)
    zetas = sorted(_as_zeta(z) for z in orders)
    values = [(z, renyi(f, g, decision, z)) for z in zetas]
    last = 0.0
    for z, v in values:
        if v < -1e-12 or v > kl_value + 1e-9:
            raise SolverError(f"Renyi value {v} at zeta={z} escapes [0, KL={kl_value}]")
        if v < last - 1e-9:
            raise SolverError("Renyi values are not non-decreasing in zeta")
        last = v
    per_decision = None
    if isinstance(f, TabularMdpInstance):
        per_decision = {d: kl(f, g, d) for d in range(f.num_decisions)}
    return DivergenceReport(kl=kl_value, renyi_values=values, per_decision=per_decision)
