"""Core abstractions for interactive decision making.

An environment is modelled by an *instance*: a map from each decision
(arm, or deterministic policy for episodic MDPs) to a distribution over
observations, together with a known reward functional.  A finite ordered
collection of structurally compatible instances forms a hypothesis
family, the object the identification machinery reasons over.

Decisions are dense integer indices into the instance's decision list.
Observations are scalar rewards for bandit-type instances and
state/action/reward trajectories for tabular MDPs.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np

#: tolerance below which two decision rewards count as tied (construction
#: rejects instances whose top two rewards are this close)
UNIQUENESS_TOL = 1e-9


class DomainError(ValueError):
    """An argument is outside an operation's domain (bad index, order, ...)."""


class ConstructionError(ValueError):
    """An instance or family violates a structural invariant."""


class FamilySizeError(ConstructionError):
    """A grid enumeration would exceed the configured instance cap."""


class SolverError(RuntimeError):
    """A numerical routine failed to converge or detected an inconsistency."""


@dataclass(frozen=True)
class Trajectory:
    """One episode of a layered MDP: (s_1, a_1, r_1, ..., s_H, a_H, r_H)."""

    states: np.ndarray   # (H,) int
    actions: np.ndarray  # (H,) int
    rewards: np.ndarray  # (H,) float

    @property
    def horizon(self) -> int:
        return len(self.states)

    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


class Instance(abc.ABC):
    """Environment model: one observation distribution per decision.

    Subclasses provide the per-decision expected rewards (used to derive
    the optimal decision and the gap vector once, at construction) and
    the sampling / log-density primitives.  Instances are immutable and
    safe to share across workers.
    """

    kind: str = "abstract"

    def __init__(self) -> None:
        rewards = np.asarray(self._expected_rewards(), dtype=float)
        if rewards.ndim != 1 or rewards.size == 0:
            raise ConstructionError("instance must expose a nonempty reward vector")
        if not np.all(np.isfinite(rewards)):
            raise ConstructionError("expected rewards must all be finite")
        order = np.argsort(rewards)
        if rewards.size > 1 and rewards[order[-1]] - rewards[order[-2]] <= UNIQUENESS_TOL:
            raise ConstructionError(
                "optimal decision is not unique: top rewards "
                f"{rewards[order[-1]]:.12g} and {rewards[order[-2]]:.12g} tie"
            )
        self._rewards = rewards
        self._rewards.setflags(write=False)
        self._optimal = int(np.argmax(rewards))
        self._gaps = rewards[self._optimal] - rewards
        self._gaps.setflags(write=False)

    # -- structure ---------------------------------------------------------

    @abc.abstractmethod
    def _expected_rewards(self) -> np.ndarray:
        """Reward of every decision, in decision-index order."""

    @property
    def num_decisions(self) -> int:
        return self._rewards.size

    @property
    def r_max(self) -> float:
        """Declared bound on the magnitude of per-round expected rewards."""
        return 1.0

    def check_decision(self, decision: int) -> int:
        d = int(decision)
        if not 0 <= d < self.num_decisions:
            raise DomainError(
                f"decision {decision} out of range for {self.num_decisions} decisions"
            )
        return d

    # -- reward geometry ----------------------------------------------------

    def expected_reward(self, decision: int) -> float:
        return float(self._rewards[self.check_decision(decision)])

    @property
    def expected_rewards(self) -> np.ndarray:
        return self._rewards

    @property
    def optimal_decision(self) -> int:
        return self._optimal

    def gap(self, decision: int) -> float:
        """Reward shortfall of ``decision`` versus the optimal decision (>= 0)."""
        return float(self._gaps[self.check_decision(decision)])

    @property
    def gaps(self) -> np.ndarray:
        return self._gaps

    @property
    def min_gap(self) -> float:
        positive = self._gaps[self._gaps > 0]
        return float(positive.min()) if positive.size else 0.0

    @property
    def max_gap(self) -> float:
        return float(self._gaps.max())

    # -- observation model --------------------------------------------------

    @abc.abstractmethod
    def sample(self, decision: int, rng: np.random.Generator):
        """Draw one observation from the decision's distribution."""

    @abc.abstractmethod
    def sample_many(self, decision: int, size: int, rng: np.random.Generator):
        """Draw ``size`` independent observations (vectorised)."""

    @abc.abstractmethod
    def log_density(self, decision: int, observation) -> float:
        """Natural-log density of ``observation``; -inf outside the support."""

    @abc.abstractmethod
    def params_key(self) -> tuple:
        """Hashable parameter snapshot used for structural equality."""

    def compatible_with(self, other: "Instance") -> bool:
        """Whether the two instances can live in one hypothesis family.

        Same kind and decision count by default; subclasses with extra
        shared structure (action sets, layer layout) tighten this.
        """
        return self.kind == other.kind and self.num_decisions == other.num_decisions

    # -- equality -----------------------------------------------------------

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Instance)
            and self.kind == other.kind
            and self.params_key() == other.params_key()
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.params_key()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"<{type(self).__name__} opt={self._optimal} rewards={self._rewards}>"


class HypothesisFamily:
    """Finite ordered list of structurally compatible instances."""

    def __init__(self, instances, dropped_ties: int = 0):
        instances = list(instances)
        if not instances:
            raise ConstructionError("hypothesis family must be nonempty")
        first = instances[0]
        for g in instances[1:]:
            if g.kind != first.kind:
                raise ConstructionError(
                    f"mixed instance kinds in family: {first.kind} vs {g.kind}"
                )
            if g.num_decisions != first.num_decisions:
                raise ConstructionError("family members disagree on decision count")
            if not first.compatible_with(g):
                raise ConstructionError("family members are structurally incompatible")
        self.instances = instances
        self.dropped_ties = int(dropped_ties)
        self._cache: dict = {}

    @property
    def kind(self) -> str:
        return self.instances[0].kind

    @property
    def num_decisions(self) -> int:
        return self.instances[0].num_decisions

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i: int):
        return self.instances[i]

    def index_of(self, instance) -> int:
        for i, g in enumerate(self.instances):
            if g == instance:
                return i
        raise DomainError("instance is not a member of this family")

    def alternatives(self, instance) -> np.ndarray:
        """Indices of members whose optimal decision differs from ``instance``'s."""
        opt = instance.optimal_decision
        return np.array(
            [i for i, g in enumerate(self.instances) if g.optimal_decision != opt],
            dtype=int,
        )

    def optimal_decisions(self) -> np.ndarray:
        key = "optimal_decisions"
        if key not in self._cache:
            self._cache[key] = np.array(
                [g.optimal_decision for g in self.instances], dtype=int
            )
        return self._cache[key]


@dataclass
class RunRecord:
    """Complete per-round log of one simulated run.

    ``decisions[t]``, ``rewards[t]`` and ``regrets[t]`` describe round
    ``t`` (0-based).  For scalar-observation families the reward *is*
    the observation payload; trajectory observations, when kept, live
    in ``trajectories``.  Phase boundaries split the run into the
    uniform-exploration prefix, the identification block, and the
    commit/fallback tail.
    """

    decisions: np.ndarray
    rewards: np.ndarray
    regrets: np.ndarray
    init_end: int
    ident_end: int
    accepted: bool
    mle_index: int | None
    committed_decision: int | None
    fallback_reason: str | None = None
    algorithm: str = "t2c"
    metadata: dict = field(default_factory=dict)
    trajectories: list | None = None

    @property
    def n(self) -> int:
        return len(self.decisions)

    def cumulative_regret(self) -> float:
        return float(self.regrets.sum())

    def regret_at(self, t: int) -> float:
        """Cumulative regret after the first ``t`` rounds."""
        if not 0 <= t <= self.n:
            raise DomainError(f"checkpoint {t} outside horizon {self.n}")
        return float(self.regrets[:t].sum())

    def validate(self) -> None:
        n = self.n
        if not (len(self.rewards) == len(self.regrets) == n):
            raise ConstructionError("run record arrays disagree on length")
        if not 0 <= self.init_end <= self.ident_end <= n:
            raise ConstructionError(
                f"phase boundaries {self.init_end}, {self.ident_end} "
                f"not non-decreasing within horizon {n}"
            )
        if np.any(self.regrets < -1e-12):
            raise ConstructionError("negative instantaneous regret recorded")
