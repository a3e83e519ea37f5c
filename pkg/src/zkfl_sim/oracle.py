"""Oracle committee: event vetting, challenge adjudication, stake bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, NoOp, NotFound


class ByzantinePolicy(Enum):
    ALWAYS_APPROVE = "always-approve"
    ALWAYS_REJECT = "always-reject"
    INVERT_TRUTH = "invert-truth"


# A scripted policy: (member, honest answer) -> vote. Used to enumerate patterns.
VoteScript = Callable[[int, bool], bool]


class ChallengeVerdict(Enum):
    INVALID = "Invalid"
    VALID = "Valid"


@dataclass(frozen=True)
class VoteTally:
    approve: tuple
    reject: tuple

    @property
    def approvals(self) -> int:
        return len(self.approve)


@dataclass(frozen=True)
class Approved:
    tally: VoteTally


@dataclass(frozen=True)
class Held:
    reason: str
    tally: Optional[VoteTally] = None


class HoldReason:
    SCHEMA = "SchemaInvalid"
    UNKNOWN_REFERENCE = "UnknownReference"
    STALE_TIMESTAMP = "StaleTimestamp"
    METRIC_MISMATCH = "MetricMismatch"
    NO_QUORUM = "InsufficientVotes"


@dataclass
class OracleRegistry:
    members: list
    f: int
    byzantine_members: frozenset = frozenset()
    policy: Union[ByzantinePolicy, VoteScript] = ByzantinePolicy.INVERT_TRUTH

    def __post_init__(self):
        if self.f < 0:
            raise ConfigError("oracle_f", "must be non-negative")
        if len(self.members) < 3 * self.f + 1:
            raise ConfigError("oracle_m", f"need at least 3f+1 = {3 * self.f + 1} members")
        self.byzantine_members = frozenset(self.byzantine_members)
        if not self.byzantine_members <= set(self.members):
            raise ConfigError("oracle_byzantine", "byzantine members must be committee members")
        if len(self.byzantine_members) > self.f:
            raise ConfigError("oracle_byzantine", f"at most f = {self.f} byzantine members")

    @property
    def quorum(self) -> int:
        return self.f + 1

    @property
    def supermajority(self) -> int:
        """Smallest vote count strictly above two thirds of the committee."""
        return 2 * len(self.members) // 3 + 1

    def _byzantine_vote(self, member: int, truth: bool) -> bool:
        policy = self.policy
        if callable(policy) and not isinstance(policy, ByzantinePolicy):
            return bool(policy(member, truth))
        if policy is ByzantinePolicy.ALWAYS_APPROVE:
            return True
        if policy is ByzantinePolicy.ALWAYS_REJECT:
            return False
        return not truth

    def cast_votes(self, truth: bool) -> VoteTally:
        """Honest members vote ``truth``; byzantine ones follow the policy."""
        yes, no = [], []
        for m in self.members:
            vote = self._byzantine_vote(m, truth) if m in self.byzantine_members else truth
            (yes if vote else no).append(m)
        return VoteTally(tuple(yes), tuple(no))

    def vet_event(self, raw, checks: Sequence[Callable]) -> Union[Approved, Held]:
        """Run the watcher checks in order and collect the committee's votes.

        Each check returns ``None`` on success or a hold reason. Honest members
        approve iff every check passes.
        """
        failure = None
        for check in checks:
            failure = check(raw)
            if failure is not None:
                break
        tally = self.cast_votes(failure is None)
        if tally.approvals >= self.quorum:
            return Approved(tally)
        return Held(failure or HoldReason.NO_QUORUM, tally)

    def adjudicate_challenge(self, disputed: Iterable, evidence: Mapping) -> dict:
        """Per-block verdict; Invalid needs strictly more than 2/3 of members.

        ``evidence[b]`` is the honest verification outcome (True = verifies).
        A byzantine member "approves" a block by voting it valid.
        """
        disputed = list(disputed)
        if not disputed:
            raise NoOp("nothing to adjudicate")
        result = {}
        for bid in disputed:
            tally = self.cast_votes(bool(evidence[bid]))
            invalid_votes = len(tally.reject)
            result[bid] = ChallengeVerdict.INVALID if 3 * invalid_votes > 2 * len(self.members) \
                else ChallengeVerdict.VALID
        return result


@dataclass(frozen=True)
class StakeVector:
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))

    @classmethod
    def uniform(cls, n: int) -> "StakeVector":
        return cls(np.full(n, 1.0 / n))

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, j):
        return self.weights[j]

    def total(self) -> float:
        return float(self.weights.sum())

    def share(self, nodes: Iterable[int]) -> float:
        return float(sum(self.weights[j] for j in nodes))


def _check(stakes: StakeVector, node: int):
    if not 0 <= node < len(stakes) or stakes.weights[node] <= 0.0:
        raise NotFound(f"node {node} holds no stake")


def _renormalized(weights: np.ndarray) -> StakeVector:
    return StakeVector(weights / weights.sum())


def slash(stakes: StakeVector, node: int, fraction: float = 0.5) -> StakeVector:
    _check(stakes, node)
    w = stakes.weights.copy()
    w[node] *= 1.0 - fraction
    return _renormalized(w)


def accrue(stakes: StakeVector, node: int, rate: float = 0.05) -> StakeVector:
    _check(stakes, node)
    w = stakes.weights.copy()
    w[node] *= 1.0 + rate
    return _renormalized(w)
