"""Concrete parametric environment families and grid family builders.

Four families are implemented: Gaussian bandits with unit noise,
Bernoulli bandits, linear bandits with unit Gaussian noise, and layered
tabular MDPs whose per-step rewards are Gaussians truncated to [-2, 2].
Hypothesis families are built by enumerating a parameter lattice;
lattice points without a unique optimal decision are dropped and
counted.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .core import (
    ConstructionError,
    DomainError,
    FamilySizeError,
    HypothesisFamily,
    Instance,
    Trajectory,
)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Reward truncation window shared by every tabular state-action pair.
TRUNC_LO = -2.0
TRUNC_HI = 2.0


# ---------------------------------------------------------------------------
# truncated Gaussian primitives (unit pre-truncation variance)
# ---------------------------------------------------------------------------

def _phi(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def tg_mass(mean, lo=TRUNC_LO, hi=TRUNC_HI):
    """Gaussian mass of [lo, hi] for N(mean, 1): the normalisation Z."""
    mean = np.asarray(mean, dtype=float)
    return ndtr(hi - mean) - ndtr(lo - mean)


def tg_mean(mean, lo=TRUNC_LO, hi=TRUNC_HI):
    """Mean of N(mean, 1) truncated to [lo, hi]."""
    mean = np.asarray(mean, dtype=float)
    z = tg_mass(mean, lo, hi)
    return mean + (_phi(lo - mean) - _phi(hi - mean)) / z


def tg_logpdf(x, mean, lo=TRUNC_LO, hi=TRUNC_HI):
    """Log-density of the truncated Gaussian; -inf outside [lo, hi]."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    inside = (x >= lo) & (x <= hi)
    body = -0.5 * np.square(x - mean) - _LOG_SQRT_2PI - np.log(tg_mass(mean, lo, hi))
    return np.where(inside, body, -np.inf)


def tg_ppf(u, mean, lo=TRUNC_LO, hi=TRUNC_HI):
    """Inverse CDF of the truncated Gaussian at probabilities ``u``."""
    u = np.asarray(u, dtype=float)
    mean = np.asarray(mean, dtype=float)
    lo_cdf = ndtr(lo - mean)
    return mean + ndtri(lo_cdf + u * tg_mass(mean, lo, hi))


class TruncatedGaussian:
    """Distribution handle for N(mean, 1) restricted to [lo, hi].

    Offers density, log-density, CDF, inverse-CDF, and an inverse-CDF
    sampler.  The mean parameter must lie in [-1, 1]; the truncation
    window is fixed independently of the mean.
    """

    def __init__(self, mean: float, lo: float = TRUNC_LO, hi: float = TRUNC_HI):
        if not -1.0 <= mean <= 1.0:
            raise DomainError(f"truncated-Gaussian mean {mean} outside [-1, 1]")
        if not lo < hi:
            raise DomainError("truncation window must satisfy lo < hi")
        self.mean = float(mean)
        self.lo = float(lo)
        self.hi = float(hi)
        self.mass = float(tg_mass(mean, lo, hi))

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def logpdf(self, x):
        return tg_logpdf(x, self.mean, self.lo, self.hi)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        return (ndtr(x - self.mean) - ndtr(self.lo - self.mean)) / self.mass

    def ppf(self, u):
        return tg_ppf(u, self.mean, self.lo, self.hi)

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.random(size))

    def truncated_mean(self) -> float:
        return float(tg_mean(self.mean, self.lo, self.hi))


def truncated_gaussian(mean: float, lo: float = TRUNC_LO, hi: float = TRUNC_HI) -> TruncatedGaussian:
    """Build the truncated-Gaussian distribution handle."""
    return TruncatedGaussian(mean, lo, hi)


# ---------------------------------------------------------------------------
# bandit families
# ---------------------------------------------------------------------------

class GaussianMabInstance(Instance):
    """Multi-armed bandit with unit-variance Gaussian rewards."""

    kind = "gaussian-mab"

    def __init__(self, means):
        means = np.asarray(means, dtype=float).copy()
        if means.ndim != 1:
            raise ConstructionError("means must be a flat vector")
        if np.any(np.abs(means) > 1.0 + 1e-12):
            raise ConstructionError(f"arm means {means} outside [-1, 1]")
        self.means = means
        self.means.setflags(write=False)
        super().__init__()

    def _expected_rewards(self) -> np.ndarray:
        return self.means

    def sample(self, decision, rng):
        d = self.check_decision(decision)
        return float(self.means[d] + rng.standard_normal())

    def sample_many(self, decision, size, rng):
        d = self.check_decision(decision)
        return self.means[d] + rng.standard_normal(size)

    def log_density(self, decision, observation):
        d = self.check_decision(decision)
        z = float(observation) - self.means[d]
        return -0.5 * z * z - _LOG_SQRT_2PI

    def params_key(self):
        return tuple(self.means.tolist())


class BernoulliMabInstance(Instance):
    """Multi-armed bandit with {0, 1} rewards."""

    kind = "bernoulli-mab"

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float).copy()
        if probs.ndim != 1:
            raise ConstructionError("probs must be a flat vector")
        if np.any((probs < 0.0) | (probs > 1.0)):
            raise ConstructionError(f"arm probabilities {probs} outside [0, 1]")
        self.probs = probs
        self.probs.setflags(write=False)
        super().__init__()

    def _expected_rewards(self) -> np.ndarray:
        return self.probs

    def sample(self, decision, rng):
        d = self.check_decision(decision)
        return float(rng.random() < self.probs[d])

    def sample_many(self, decision, size, rng):
        d = self.check_decision(decision)
        return (rng.random(size) < self.probs[d]).astype(float)

    def log_density(self, decision, observation):
        d = self.check_decision(decision)
        p = self.probs[d]
        o = float(observation)
        if o == 1.0:
            return math.log(p) if p > 0.0 else -math.inf
        if o == 0.0:
            return math.log1p(-p) if p < 1.0 else -math.inf
        return -math.inf

    def params_key(self):
        return tuple(self.probs.tolist())


class LinearBanditInstance(Instance):
    """Finite-action linear bandit, reward <x, theta> plus unit Gaussian noise."""

    kind = "linear-bandit"

    def __init__(self, actions, theta):
        actions = np.asarray(actions, dtype=float).copy()
        theta = np.asarray(theta, dtype=float).copy()
        if actions.ndim != 2:
            raise ConstructionError("actions must be a (num_actions, dim) matrix")
        k, d = actions.shape
        if theta.shape != (d,):
            raise ConstructionError(f"theta shape {theta.shape} incompatible with dim {d}")
        norms = np.linalg.norm(actions, axis=1)
        if np.any(norms > 1.0 + 1e-9):
            raise ConstructionError(f"action norms {norms} exceed 1")
        if np.linalg.matrix_rank(actions) < d:
            raise ConstructionError("action set is not full rank")
        self.actions = actions
        self.theta = theta
        self.actions.setflags(write=False)
        self.theta.setflags(write=False)
        super().__init__()

    def _expected_rewards(self) -> np.ndarray:
        return self.actions @ self.theta

    @property
    def dim(self) -> int:
        return self.actions.shape[1]

    @property
    def r_max(self) -> float:
        return max(1.0, float(np.abs(self.expected_rewards).max()))

    def sample(self, decision, rng):
        d = self.check_decision(decision)
        return float(self.expected_rewards[d] + rng.standard_normal())

    def sample_many(self, decision, size, rng):
        d = self.check_decision(decision)
        return self.expected_rewards[d] + rng.standard_normal(size)

    def log_density(self, decision, observation):
        d = self.check_decision(decision)
        z = float(observation) - self.expected_rewards[d]
        return -0.5 * z * z - _LOG_SQRT_2PI

    def params_key(self):
        return tuple(self.theta.tolist()) + tuple(self.actions.ravel().tolist())

    def compatible_with(self, other):
        return (
            super().compatible_with(other)
            and np.array_equal(self.actions, other.actions)
        )


# ---------------------------------------------------------------------------
# layered tabular MDP
# ---------------------------------------------------------------------------

class TabularMdpInstance(Instance):
    """Episodic layered MDP with truncated-Gaussian rewards.

    States are globally indexed 0..S-1 and partitioned into layers
    1..H; an episode visits one state per layer, starting from the first
    state of layer 1.  Transitions out of layer ``h`` are supported on
    layer ``h+1`` only (rows of the last layer are unused).  Decisions
    are the |A|^S deterministic policies, enumerated lexicographically
    over states: policy index ``k`` assigns action
    ``(k // A**(S-1-s)) % A`` to state ``s``.
    """

    kind = "tabular-mdp"
    MAX_POLICIES = 4096

    def __init__(self, layers, num_actions, transitions, reward_means):
        layers = tuple(int(x) for x in layers)
        if not layers or any(x <= 0 for x in layers):
            raise ConstructionError("layer sizes must all be positive")
        S = sum(layers)
        A = int(num_actions)
        p = np.asarray(transitions, dtype=float).copy()
        mu = np.asarray(reward_means, dtype=float).copy()
        if p.shape != (S, A, S):
            raise ConstructionError(f"transitions must have shape ({S}, {A}, {S})")
        if mu.shape != (S, A):
            raise ConstructionError(f"reward means must have shape ({S}, {A})")
        if np.any(np.abs(mu) > 1.0 + 1e-12):
            raise ConstructionError("reward means outside [-1, 1]")
        if np.any(p < -1e-15):
            raise ConstructionError("negative transition probability")
        if A ** S > self.MAX_POLICIES:
            raise ConstructionError(
                f"{A}**{S} policies exceed the supported cap {self.MAX_POLICIES}"
            )

        layer_of = np.concatenate(
            [np.full(sz, h, dtype=int) for h, sz in enumerate(layers)]
        )
        starts = np.concatenate([[0], np.cumsum(layers)])
        for s in range(S):
            h = layer_of[s]
            if h == len(layers) - 1:
                continue  # terminal layer: transition rows unused
            nxt = slice(starts[h + 1], starts[h + 2])
            for a in range(A):
                row = p[s, a]
                if abs(row.sum() - 1.0) > 1e-12:
                    raise ConstructionError(
                        f"transition row (state {s}, action {a}) sums to {row.sum():.15g}"
                    )
                outside = row.copy()
                outside[nxt] = 0.0
                if np.any(outside > 1e-15):
                    raise ConstructionError(
                        f"transition row (state {s}, action {a}) leaves layer {h + 1}"
                    )

        self.layers = layers
        self.num_actions_per_state = A
        self.p = p
        self.mu = mu
        self.p.setflags(write=False)
        self.mu.setflags(write=False)
        self.num_states = S
        self.horizon = len(layers)
        self._layer_of = layer_of
        self._layer_starts = starts
        self._tg_means = tg_mean(mu)          # (S, A) truncated means
        self._tg_log_mass = np.log(tg_mass(mu))
        with np.errstate(divide="ignore"):
            self._log_p = np.log(p)
        super().__init__()

    # -- policies ------------------------------------------------------------

    def policy_actions(self, decision: int) -> np.ndarray:
        """Per-state action assignment of the given policy index."""
        d = self.check_decision(decision) if hasattr(self, "_rewards") else int(decision)
        S, A = self.num_states, self.num_actions_per_state
        return (d // A ** (S - 1 - np.arange(S))) % A

    def layer_states(self, h: int) -> np.ndarray:
        return np.arange(self._layer_starts[h], self._layer_starts[h + 1])

    def occupancy(self, decision: int) -> np.ndarray:
        """State-visit probabilities under the policy (one layer at a time)."""
        acts = self.policy_actions(decision)
        occ = np.zeros(self.num_states)
        occ[0] = 1.0
        for h in range(self.horizon - 1):
            cur = self.layer_states(h)
            nxt = self.layer_states(h + 1)
            for s in cur:
                if occ[s] > 0.0:
                    occ[nxt] += occ[s] * self.p[s, acts[s], nxt]
        return occ

    def _expected_rewards(self) -> np.ndarray:
        S, A = self.num_states, self.num_actions_per_state
        n_pol = A ** S
        out = np.empty(n_pol)
        for k in range(n_pol):
            occ = self.occupancy(k)
            acts = self.policy_actions(k)
            out[k] = float(np.sum(occ * self._tg_means[np.arange(S), acts]))
        return out

    @property
    def r_max(self) -> float:
        return 2.0 * self.horizon

    # -- observation model -----------------------------------------------------

    def sample(self, decision, rng):
        d = self.check_decision(decision)
        acts = self.policy_actions(d)
        states = np.empty(self.horizon, dtype=int)
        actions = np.empty(self.horizon, dtype=int)
        rewards = np.empty(self.horizon)
        s = 0
        for h in range(self.horizon):
            a = acts[s]
            states[h], actions[h] = s, a
            rewards[h] = float(tg_ppf(rng.random(), self.mu[s, a]))
            if h < self.horizon - 1:
                nxt = self.layer_states(h + 1)
                s = int(rng.choice(nxt, p=self.p[s, a, nxt]))
        return Trajectory(states, actions, rewards)

    def sample_many(self, decision, size, rng):
        """Vectorised episode sampling: (size, H) state/action/reward arrays."""
        d = self.check_decision(decision)
        acts = self.policy_actions(d)
        states = np.zeros((size, self.horizon), dtype=int)
        actions = np.empty((size, self.horizon), dtype=int)
        rewards = np.empty((size, self.horizon))
        cur = np.zeros(size, dtype=int)
        for h in range(self.horizon):
            a = acts[cur]
            actions[:, h] = a
            states[:, h] = cur
            rewards[:, h] = tg_ppf(rng.random(size), self.mu[cur, a])
            if h < self.horizon - 1:
                nxt = self.layer_states(h + 1)
                u = rng.random(size)
                new = np.empty(size, dtype=int)
                for s in np.unique(cur):
                    mask = cur == s
                    cum = np.cumsum(self.p[s, acts[s], nxt])
                    new[mask] = nxt[np.searchsorted(cum, u[mask], side="right").clip(max=len(nxt) - 1)]
                cur = new
        return states, actions, rewards

    def log_density(self, decision, observation) -> float:
        d = self.check_decision(decision)
        traj: Trajectory = observation
        if traj.horizon != self.horizon:
            raise DomainError(
                f"trajectory horizon {traj.horizon} does not match instance horizon {self.horizon}"
            )
        acts = self.policy_actions(d)
        total = 0.0
        for h in range(self.horizon):
            s, a, r = int(traj.states[h]), int(traj.actions[h]), float(traj.rewards[h])
            if self._layer_of[s] != h or a != acts[s]:
                return -math.inf
            lr = float(tg_logpdf(r, self.mu[s, a]))
            if not np.isfinite(lr):
                return -math.inf
            total += lr
            if h < self.horizon - 1:
                s_next = int(traj.states[h + 1])
                lp = self._log_p[s, a, s_next]
                if not np.isfinite(lp):
                    return -math.inf
                total += lp
        return total

    def log_density_many(self, states, actions, rewards) -> np.ndarray:
        """Log densities of stacked trajectories whose actions follow some policy.

        Rows are assumed layer-consistent (as produced by ``sample_many``);
        the per-row action sequence is evaluated as given, so this also
        scores trajectories generated by other members of the family.
        """
        total = tg_logpdf(rewards, self.mu[states, actions]).sum(axis=1)
        for h in range(self.horizon - 1):
            total = total + self._log_p[states[:, h], actions[:, h], states[:, h + 1]]
        return total

    def params_key(self):
        return (
            self.layers,
            self.num_actions_per_state,
            tuple(np.round(self.p, 15).ravel().tolist()),
            tuple(self.mu.ravel().tolist()),
        )

    def compatible_with(self, other):
        return (
            super().compatible_with(other)
            and self.layers == other.layers
            and self.num_actions_per_state == other.num_actions_per_state
        )


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

_KIND_BUILDERS = {
    "gaussian-mab": lambda params: GaussianMabInstance(params["means"]),
    "bernoulli-mab": lambda params: BernoulliMabInstance(params["probs"]),
    "linear-bandit": lambda params: LinearBanditInstance(params["actions"], params["theta"]),
    "tabular-mdp": lambda params: TabularMdpInstance(
        params["layers"], params["num_actions"], params["transitions"], params["reward_means"]
    ),
}


def build_instance(kind: str, params: dict) -> Instance:
    """Validate and construct an instance of the named family."""
    try:
        builder = _KIND_BUILDERS[kind]
    except KeyError:
        raise DomainError(f"unknown family kind {kind!r}") from None
    return builder(params)


@dataclass(frozen=True)
class GridSpec:
    """Lattice description for enumerated hypothesis families.

    ``step`` is the spacing applied to every gridded parameter; ``lo``
    and ``hi`` bound each parameter (scalars broadcast to all
    dimensions).  ``cap`` guards against combinatorial explosions.
    """

    step: float
    lo: float | tuple = -1.0
    hi: float | tuple = 1.0
    cap: int = 10 ** 6

    def __post_init__(self):
        if self.step <= 0:
            raise ConstructionError("grid step must be positive")

    def axis_values(self, dim: int) -> list[np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (dim,))
        hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (dim,))
        axes = []
        for d in range(dim):
            if lo[d] > hi[d]:
                raise ConstructionError("grid lower bound exceeds upper bound")
            count = int(math.floor((hi[d] - lo[d]) / self.step + 1e-9)) + 1
            axes.append(lo[d] + self.step * np.arange(count))
        return axes


def build_grid_family(kind: str, grid: GridSpec, template: dict | None = None) -> HypothesisFamily:
    """Enumerate a parameter lattice into a hypothesis family.

    Gridded parameters are the arm means (Gaussian), arm probabilities
    (Bernoulli), the parameter vector theta (linear bandits; the action
    set is shared), or the reward means (tabular; transitions are
    shared).  Lattice points whose optimum is not unique are dropped
    and counted in ``family.dropped_ties``.  Ordering is lexicographic
    in the parameters.
    """
    template = dict(template or {})
    if kind == "gaussian-mab":
        dim = int(template["arms"])
        make = lambda v: GaussianMabInstance(np.array(v))
    elif kind == "bernoulli-mab":
        dim = int(template["arms"])
        make = lambda v: BernoulliMabInstance(np.array(v))
    elif kind == "linear-bandit":
        actions = np.asarray(template["actions"], dtype=float)
        dim = actions.shape[1]
        make = lambda v: LinearBanditInstance(actions, np.array(v))
    elif kind == "tabular-mdp":
        layers = tuple(template["layers"])
        A = int(template["num_actions"])
        p = np.asarray(template["transitions"], dtype=float)
        S = sum(layers)
        dim = S * A
        make = lambda v: TabularMdpInstance(layers, A, p, np.array(v).reshape(S, A))
    else:
        raise DomainError(f"unknown family kind {kind!r}")

    axes = grid.axis_values(dim)
    count = math.prod(len(ax) for ax in axes)
    if count > grid.cap:
        raise FamilySizeError(
            f"grid would enumerate {count} instances, exceeding the cap {grid.cap}"
        )

    instances, dropped = [], 0
    for values in itertools.product(*axes):
        try:
            instances.append(make(values))
        except ConstructionError:
            dropped += 1
    if not instances:
        raise ConstructionError("grid produced no valid instances")
    return HypothesisFamily(instances, dropped_ties=dropped)
