"""Lamport-ordered event log and the five per-node contracts.

Every state change outside local training goes through ``Sidechain.append_event``:
the oracle committee vets the raw event, approved events get a stamp, land in
the ordered log and are dispatched to the contracts that subscribe to them.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import CannotEscrow, DuplicateSubmission, NoOp, WrongPhase
from .ledger import BlockStatus, DagLedger
from .oracle import (
    Approved,
    ChallengeVerdict,
    Held,
    HoldReason,
    OracleRegistry,
    StakeVector,
    accrue,
    slash,
)
from .proofs import (
    ACCEPT,
    EpochThresholds,
    ProofBundle,
    RejectReason,
    Verdict,
    detect_replay,
    verify_bundle,
)

COMMITTEE_AUTHOR = -1


class EventKind(Enum):
    ZKP_READY = "ZkpReady"
    PARENTS_SELECTED = "ParentsSelected"
    SUSPECT_DETECTED = "SuspectDetected"
    TRAINER_AVAILABLE = "TrainerAvailable"
    BLOCK_SUBMITTED = "BlockSubmitted"
    NORM_THRESHOLDS_PUBLISHED = "NormThresholdsPublished"
    COSINE_THRESHOLDS_PUBLISHED = "CosineThresholdsPublished"


_NUMBER = (int, float)
_SCHEMAS = {
    EventKind.ZKP_READY: {"node": int, "epoch": int, "model_commit": str,
                          "test_commit": str, "declared_loss": _NUMBER},
    EventKind.PARENTS_SELECTED: {"node": int, "epoch": int, "block_id": str, "parents": list},
    EventKind.SUSPECT_DETECTED: {"node": int, "epoch": int, "suspects": list},
    EventKind.TRAINER_AVAILABLE: {"node": int, "epoch": int},
    EventKind.BLOCK_SUBMITTED: {"node": int, "epoch": int, "block_id": str},
    EventKind.NORM_THRESHOLDS_PUBLISHED: {"epoch": int, "l_t": _NUMBER + (str,),
                                          "b_t": _NUMBER + (str,)},
    EventKind.COSINE_THRESHOLDS_PUBLISHED: {"epoch": int, "tau_max": _NUMBER},
}


def encode_real(x: float):
    """JSON has no infinity; non-finite reals travel as strings."""
    return str(x) if not math.isfinite(x) else float(x)


def decode_real(x) -> float:
    return float(x)


@dataclass(frozen=True, order=True)
class LamportStamp:
    counter: int
    author: int


class LamportClock:
    def __init__(self):
        self.counter = 0

    def tick(self) -> int:
        self.counter += 1
        return self.counter

    def observe(self, counter: int) -> None:
        self.counter = max(self.counter, counter) + 1


@dataclass(frozen=True)
class RawEvent:
    kind: EventKind
    payload: dict
    author: int
    counter: int

    def canonical(self) -> bytes:
        record = {"kind": self.kind.value, "payload": self.payload,
                  "counter": self.counter, "author": self.author}
        return json.dumps(record, sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()


@dataclass(frozen=True)
class ApprovedEvent:
    kind: EventKind
    payload: dict
    stamp: LamportStamp
    event_hash: bytes
    votes: tuple

    def sort_key(self):
        return (self.stamp.counter, self.stamp.author, self.event_hash)

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "payload": self.payload,
                "lamport_counter": self.stamp.counter, "author": self.stamp.author,
                "event_hash": self.event_hash.hex()}


class Phase(Enum):
    IDLE = "Idle"
    ACTIVE = "Active"
    COMPLETE = "Complete"


@dataclass(frozen=True)
class ChallengeOutcome:
    challenger: int
    revoked: tuple
    upheld: tuple
    escrow: float
    slashed: bool


class BlockVerifier:
    """Replay check plus bundle verification, shared by every validating node.

    Verification is deterministic, so one cache serves all nodes. A block is
    an eligible parent only if its own proof is ready and verifies and every
    non-genesis parent is eligible too; otherwise an honest block could sit on
    top of an invalid one and carry it to confirmation.
    """

    def __init__(self, chain: "Sidechain", extended: bool, enabled: bool = True):
        self.chain = chain
        self.extended = extended
        self.enabled = enabled
        self.ready_at: dict = {}
        self._verdicts: dict = {}
        self._eligible: dict = {}

    def proof_ready(self, bid, epoch: int) -> bool:
        return self.ready_at.get(bid, 0) <= epoch

    def verdict(self, bid) -> Verdict:
        cached = self._verdicts.get(bid)
        if cached is not None:
            return cached
        block = self.chain.ledger.get(bid)
        if block.is_genesis or not self.enabled:
            result = ACCEPT
        elif detect_replay(block.bundle, self.chain.prior_commitments(block.author, block.epoch)):
            result = Verdict(RejectReason.REPLAY)
        else:
            thresholds = self.chain.thresholds_for(block.epoch)
            result = verify_bundle(block.bundle, thresholds, self.extended)
        self._verdicts[bid] = result
        return result

    def eligible(self, bid, epoch: int) -> bool:
        ledger = self.chain.ledger
        block = ledger.get(bid)
        if block.is_genesis:
            return True
        if block.status is BlockStatus.REVOKED:
            self._eligible[bid] = False
            return False
        cached = self._eligible.get(bid)
        if cached is not None:
            return cached
        if not self.enabled:
            return True
        if not self.proof_ready(bid, epoch):
            return False
        if not self.verdict(bid).accepted:
            self._eligible[bid] = False
            return False
        for p in block.parents:
            if not self.eligible(p, epoch):
                parent = ledger.get(p)
                if parent.status is BlockStatus.REVOKED or self._eligible.get(p) is False:
                    self._eligible[bid] = False
                return False
        self._eligible[bid] = True
        return True


class Contract:
    kind: EventKind = None

    def __init__(self, node: int, chain: "Sidechain"):
        self.node = node
        self.chain = chain
        self.phase = Phase.IDLE
        self.epoch: Optional[int] = None

    def on_event(self, event: ApprovedEvent) -> None:
        if event.kind is self.kind and event.payload.get("node") == self.node:
            self.phase = Phase.ACTIVE
            self.epoch = event.payload["epoch"]

    def _require_active(self):
        if self.phase is not Phase.ACTIVE:
            raise WrongPhase(f"{type(self).__name__} of node {self.node} is {self.phase.value}")

    def reset(self):
        self.phase = Phase.IDLE
        self.epoch = None


class ValidationContract(Contract):
    """S1: verify candidate tips and pick the lowest-loss valid ones."""

    kind = EventKind.ZKP_READY

    def __init__(self, node, chain):
        super().__init__(node, chain)
        self.cached_norms: dict = {}
        self.cached_cosines: dict = {}

    def on_event(self, event):
        if event.kind is EventKind.NORM_THRESHOLDS_PUBLISHED:
            p = event.payload
            self.cached_norms[p["epoch"]] = (decode_real(p["l_t"]), decode_real(p["b_t"]))
        elif event.kind is EventKind.COSINE_THRESHOLDS_PUBLISHED:
            self.cached_cosines[event.payload["epoch"]] = decode_real(event.payload["tau_max"])
        else:
            super().on_event(event)

    def thresholds(self, epoch: int) -> EpochThresholds:
        if epoch not in self.cached_norms or epoch not in self.cached_cosines:
            raise WrongPhase(f"thresholds for epoch {epoch} not published yet")
        l_t, b_t = self.cached_norms[epoch]
        return EpochThresholds(epoch, l_t, b_t, self.cached_cosines[epoch])

    def validate(self, candidates, k_v: int) -> list:
        self._require_active()
        self.thresholds(self.epoch)
        verifier = self.chain.verifier
        ledger = self.chain.ledger
        epoch = self.epoch

        def loss_if_valid(bid):
            if not verifier.eligible(bid, epoch):
                return None
            block = ledger.get(bid)
            return 0.0 if block.is_genesis else block.bundle.declared_loss

        if verifier.enabled:
            chosen = ledger.rank_and_select_parents(candidates, k_v, loss_if_valid)
        else:
            chosen = list(candidates[:k_v])
        self.phase = Phase.COMPLETE
        return chosen


class SubmissionContract(Contract):
    """S2: attach the block, then confirm whatever crossed the threshold."""

    kind = EventKind.PARENTS_SELECTED

    def submit(self, block) -> list:
        self._require_active()
        key = (self.node, block.epoch)
        if key in self.chain.submissions:
            raise DuplicateSubmission(f"node {self.node} already submitted in epoch {block.epoch}")
        self.chain.ledger.attach_block(block)
        self.chain.submissions[key] = block.id
        newly = self.chain.ledger.run_confirmation(self.epoch)
        self.chain.confirmed_in[self.epoch].extend(newly)
        self.phase = Phase.COMPLETE
        return newly


class ChallengeContract(Contract):
    """S3: escrow stake, let the committee judge, revoke or slash."""

    kind = EventKind.SUSPECT_DETECTED

    def challenge(self, suspects, stake_fraction: float, slash_fraction: float) -> ChallengeOutcome:
        self._require_active()
        suspects = sorted(suspects)
        if not suspects:
            raise NoOp("no suspects to challenge")
        chain = self.chain
        stake = chain.stakes[self.node]
        if stake <= 0.0:
            raise CannotEscrow(f"node {self.node} has no stake")
        escrow = stake_fraction * stake
        evidence = {bid: chain.verifier.verdict(bid).accepted for bid in suspects}
        rulings = chain.registry.adjudicate_challenge(suspects, evidence)
        revoked = tuple(b for b in suspects if rulings[b] is ChallengeVerdict.INVALID)
        upheld = tuple(b for b in suspects if rulings[b] is ChallengeVerdict.VALID)
        for bid in revoked:
            chain.ledger.revoke(bid)
        slashed = not revoked
        if slashed:
            chain.stakes = slash(chain.stakes, self.node, slash_fraction)
        outcome = ChallengeOutcome(self.node, revoked, upheld, escrow, slashed)
        chain.challenges.append((self.epoch, outcome))
        self.phase = Phase.COMPLETE
        return outcome


class AggregationContract(Contract):
    """S4: weighted mean of the latest newly confirmed model of each node."""

    kind = EventKind.TRAINER_AVAILABLE

    def __init__(self, node, chain, initial_model):
        super().__init__(node, chain)
        self.global_model = np.array(initial_model, dtype=float)

    def aggregate(self, uniform: bool = False) -> np.ndarray:
        self._require_active()
        chain = self.chain
        latest = {}
        for bid in chain.confirmed_in.get(self.epoch, ()):
            block = chain.ledger.get(bid)
            if block.is_genesis:
                continue
            # stake alone can confirm a block, so each node re-checks the proof
            if not (chain.verifier.proof_ready(bid, self.epoch)
                    and chain.verifier.verdict(bid).accepted):
                continue
            best = latest.get(block.author)
            if best is None or block.epoch > best.epoch:
                latest[block.author] = block
        if latest:
            authors = sorted(latest)
            raw = np.array([1.0 if uniform else chain.stakes[a] for a in authors])
            weights = raw / raw.sum()
            models = np.stack([latest[a].model for a in authors])
            self.global_model = weights @ models
            chain.aggregation_trace.append(
                (self.epoch, self.node, tuple(latest[a].id for a in authors), tuple(weights)))
        self.phase = Phase.COMPLETE
        return self.global_model


class RewardContract(Contract):
    """S5: accrue stake for accepted blocks, slash for rejected bundles."""

    kind = EventKind.BLOCK_SUBMITTED

    def __init__(self, node, chain):
        super().__init__(node, chain)
        self.settled: set = set()

    def reward(self, accrual_rate: float, slash_fraction: Optional[float]) -> list:
        """Settle this node's blocks whose proofs are in; returns (block, accepted) pairs."""
        self._require_active()
        chain = self.chain
        done = []
        for (node, epoch), bid in sorted(chain.submissions.items()):
            if node != self.node or bid in self.settled:
                continue
            if not chain.verifier.proof_ready(bid, self.epoch):
                continue
            accepted = chain.verifier.verdict(bid).accepted
            if accepted:
                chain.stakes = accrue(chain.stakes, node, accrual_rate)
            elif slash_fraction is not None:
                chain.stakes = slash(chain.stakes, node, slash_fraction)
            self.settled.add(bid)
            done.append((bid, accepted))
            chain.rewards.append((self.epoch, node, bid, accepted))
        self.phase = Phase.COMPLETE
        return done


class Sidechain:
    def __init__(self, registry: OracleRegistry, ledger: DagLedger, n_nodes: int,
                 stakes: StakeVector, initial_model, extended: bool = True,
                 validation: bool = True, k_v: int = 4):
        self.registry = registry
        self.ledger = ledger
        self.stakes = stakes
        self.k_v = k_v
        self.log: list = []
        self.held: list = []
        self.last_counter: dict = {}
        self.clocks = defaultdict(LamportClock)
        self.posted: dict = {}
        self.commitments = defaultdict(list)
        self.published: dict = {}
        self.submissions: dict = {}
        self.confirmed_in = defaultdict(list)
        self.challenges: list = []
        self.rewards: list = []
        self.aggregation_trace: list = []
        self.verifier = BlockVerifier(self, extended, enabled=validation)
        self.s1 = [ValidationContract(j, self) for j in range(n_nodes)]
        self.s2 = [SubmissionContract(j, self) for j in range(n_nodes)]
        self.s3 = [ChallengeContract(j, self) for j in range(n_nodes)]
        self.s4 = [AggregationContract(j, self, initial_model) for j in range(n_nodes)]
        self.s5 = [RewardContract(j, self) for j in range(n_nodes)]

    # event plumbing -----------------------------------------------------------
    def make_event(self, kind: EventKind, author: int, payload: dict) -> RawEvent:
        return RawEvent(kind, payload, author, self.clocks[author].tick())

    def _checks(self):
        return (self._check_schema, self._check_references,
                self._check_timestamp, self._check_metrics)

    def _check_schema(self, raw: RawEvent):
        schema = _SCHEMAS.get(raw.kind)
        if schema is None or not isinstance(raw.payload, dict):
            return HoldReason.SCHEMA
        for key, typ in schema.items():
            value = raw.payload.get(key)
            if value is None or not isinstance(value, typ) or isinstance(value, bool):
                return HoldReason.SCHEMA
        if "node" in schema and raw.payload["node"] != raw.author:
            return HoldReason.SCHEMA
        if "node" not in schema and raw.author != COMMITTEE_AUTHOR:
            return HoldReason.SCHEMA
        return None

    def _known_block(self, hex_id) -> bool:
        try:
            return bytes.fromhex(hex_id) in self.ledger
        except (TypeError, ValueError):
            return False

    def _check_references(self, raw: RawEvent):
        p = raw.payload
        if raw.kind is EventKind.ZKP_READY:
            bundle = self.posted.get((p["node"], p["epoch"]))
            if bundle is None or bundle.model_commit.hex() != p["model_commit"] \
                    or bundle.test_commit.hex() != p["test_commit"]:
                return HoldReason.UNKNOWN_REFERENCE
        elif raw.kind is EventKind.PARENTS_SELECTED:
            if not p["parents"]:
                return HoldReason.SCHEMA
            for hex_id in p["parents"]:
                if not self._known_block(hex_id):
                    return HoldReason.UNKNOWN_REFERENCE
                if self.ledger.get(bytes.fromhex(hex_id)).status is BlockStatus.REVOKED:
                    return HoldReason.UNKNOWN_REFERENCE
        elif raw.kind is EventKind.BLOCK_SUBMITTED:
            if not self._known_block(p["block_id"]):
                return HoldReason.UNKNOWN_REFERENCE
        elif raw.kind is EventKind.SUSPECT_DETECTED:
            if not all(self._known_block(h) for h in p["suspects"]):
                return HoldReason.UNKNOWN_REFERENCE
        return None

    def _check_timestamp(self, raw: RawEvent):
        if raw.counter <= self.last_counter.get(raw.author, 0):
            return HoldReason.STALE_TIMESTAMP
        return None

    def _check_metrics(self, raw: RawEvent):
        p = raw.payload
        if raw.kind is EventKind.ZKP_READY:
            bundle = self.posted[(p["node"], p["epoch"])]
            if float(p["declared_loss"]) != bundle.declared_loss:
                return HoldReason.METRIC_MISMATCH
        elif raw.kind is EventKind.PARENTS_SELECTED:
            if len(p["parents"]) > self.k_v or len(set(p["parents"])) != len(p["parents"]):
                return HoldReason.METRIC_MISMATCH
        elif raw.kind is EventKind.BLOCK_SUBMITTED:
            block = self.ledger.get(bytes.fromhex(p["block_id"]))
            if block.author != p["node"] or block.epoch != p["epoch"]:
                return HoldReason.METRIC_MISMATCH
        elif raw.kind is EventKind.SUSPECT_DETECTED:
            for h in p["suspects"]:
                if self.ledger.get(bytes.fromhex(h)).status not in (BlockStatus.TIP,
                                                                      BlockStatus.UNCONFIRMED):
                    return HoldReason.METRIC_MISMATCH
        elif raw.kind is EventKind.NORM_THRESHOLDS_PUBLISHED:
            l_t, b_t = decode_real(p["l_t"]), decode_real(p["b_t"])
            if not 0.0 <= l_t <= b_t:
                return HoldReason.METRIC_MISMATCH
        elif raw.kind is EventKind.COSINE_THRESHOLDS_PUBLISHED:
            if not -1.0 <= p["tau_max"] <= 1.0:
                return HoldReason.METRIC_MISMATCH
        return None

    def append_event(self, raw: RawEvent):
        """Vet, stamp, insert in (counter, author) order and dispatch."""
        decision = self.registry.vet_event(raw, self._checks())
        if isinstance(decision, Held):
            self.held.append((raw, decision))
            return decision
        event = ApprovedEvent(raw.kind, raw.payload, LamportStamp(raw.counter, raw.author),
                              raw.digest(), decision.tally.approve)
        bisect.insort(self.log, event, key=ApprovedEvent.sort_key)
        self.last_counter[raw.author] = raw.counter
        for author, clock in self.clocks.items():
            if author != raw.author:
                clock.observe(raw.counter)
        self._dispatch(event)
        return event

    def append_batch(self, raws) -> list:
        """Concurrent events: processed in stamp order whatever the arrival order."""
        ordered = sorted(raws, key=lambda r: (r.counter, r.author, r.digest()))
        return [self.append_event(r) for r in ordered]

    def _dispatch(self, event: ApprovedEvent):
        kind = event.kind
        if kind in (EventKind.NORM_THRESHOLDS_PUBLISHED, EventKind.COSINE_THRESHOLDS_PUBLISHED):
            for c in self.s1:
                c.on_event(event)
            return
        node = event.payload["node"]
        table = {
            EventKind.ZKP_READY: self.s1,
            EventKind.PARENTS_SELECTED: self.s2,
            EventKind.SUSPECT_DETECTED: self.s3,
            EventKind.TRAINER_AVAILABLE: self.s4,
            EventKind.BLOCK_SUBMITTED: self.s5,
        }
        if 0 <= node < len(table[kind]):
            table[kind][node].on_event(event)

    def emit(self, kind: EventKind, author: int, payload: dict):
        return self.append_event(self.make_event(kind, author, payload))

    # protocol state ---------------------------------------------------------------
    def post_bundle(self, bundle: ProofBundle) -> None:
        """Register a bundle's commitments so a ZkpReady event can reference them."""
        self.posted[(bundle.author, bundle.epoch)] = bundle
        self.commitments[bundle.author].append((bundle.epoch, bundle.model_commit))

    def prior_commitments(self, node: int, epoch: int) -> dict:
        return {node: [c for e, c in self.commitments.get(node, ()) if e < epoch]}

    def publish_thresholds(self, thresholds: EpochThresholds) -> tuple:
        t = thresholds.epoch
        norm = self.emit(EventKind.NORM_THRESHOLDS_PUBLISHED, COMMITTEE_AUTHOR,
                         {"epoch": t, "l_t": encode_real(thresholds.l_t),
                          "b_t": encode_real(thresholds.b_t)})
        cos = self.emit(EventKind.COSINE_THRESHOLDS_PUBLISHED, COMMITTEE_AUTHOR,
                        {"epoch": t, "tau_max": thresholds.tau_max})
        if isinstance(norm, ApprovedEvent) and isinstance(cos, ApprovedEvent):
            self.published[t] = thresholds
        return norm, cos

    def thresholds_for(self, epoch: int) -> EpochThresholds:
        return self.published.get(epoch) or EpochThresholds.bootstrap(epoch)

    def end_epoch(self) -> None:
        for group in (self.s1, self.s2, self.s3, self.s4, self.s5):
            for c in group:
                c.reset()

    def export_ndjson(self) -> str:
        return "".join(json.dumps(e.to_record(), sort_keys=True) + "\n" for e in self.log)
