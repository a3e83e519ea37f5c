"""Simulated proof layer.

Commitments are domain-separated sha256 digests. Proofs are not real SNARKs:
each bundle carries a private witness, and the verifier reruns the claimed
computation on it after checking that the witness opens the public
commitments. A bundle that lies anywhere fails the same check a real
verifier would fail.
"""

from __future__ import annotations

import hashlib
import math
import statistics
import struct
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InsufficientHistory
from .learning import Batch, Task, cosine

MODEL_TAG = "model"
TEST_TAG = "test"
OUTPUTS_TAG = "outputs"

# loss recomputation must match to this relative tolerance
LOSS_TOLERANCE = 1e-12


def canonical_bytes(obj) -> bytes:
    """Fixed-width little-endian encoding of arrays, numbers, batches and tuples."""
    if isinstance(obj, Batch):
        return canonical_bytes((obj.features, obj.labels))
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind in "iub":
            arr = np.ascontiguousarray(obj, dtype="<i8")
            kind = b"i"
        else:
            arr = np.ascontiguousarray(obj, dtype="<f8")
            kind = b"f"
        header = kind + struct.pack("<q", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape)
        return header + arr.tobytes()
    if isinstance(obj, (tuple, list)):
        parts = [canonical_bytes(x) for x in obj]
        return b"T" + struct.pack("<q", len(parts)) + b"".join(
            struct.pack("<q", len(p)) + p for p in parts)
    if isinstance(obj, bool):
        return b"b" + struct.pack("<?", obj)
    if isinstance(obj, int):
        return b"i" + struct.pack("<q", obj)
    if isinstance(obj, float):
        return b"d" + struct.pack("<d", obj)
    if isinstance(obj, bytes):
        return b"B" + struct.pack("<q", len(obj)) + obj
    raise TypeError(f"no canonical encoding for {type(obj).__name__}")


@dataclass(frozen=True)
class Commitment:
    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()


def commit(obj, domain_tag: str) -> Commitment:
    h = hashlib.sha256(b"zkfl/commit/" + domain_tag.encode() + b"\x00")
    h.update(obj if isinstance(obj, bytes) else canonical_bytes(obj))
    return Commitment(h.digest())


class RejectReason(Enum):
    COMMITMENT_MISMATCH = "CommitmentMismatch"
    INFERENCE_MISMATCH = "InferenceMismatch"
    NORM_BELOW_LOWER = "NormBelowLower"
    NORM_ABOVE_UPPER = "NormAboveUpper"
    COSINE_TOO_HIGH = "CosineTooHigh"
    MISSING_EXTENDED_PROOFS = "MissingExtendedProofs"
    # only produced by the combined replay-then-verify path, never by verify_bundle
    REPLAY = "Replay"


@dataclass(frozen=True)
class Verdict:
    reason: Optional[RejectReason] = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __str__(self):
        return "Accept" if self.accepted else f"Reject({self.reason.value})"


ACCEPT = Verdict()


class TamperKind(Enum):
    NONE = "none"
    FAKE_LOSS = "fake_loss"
    SUBSTITUTE_MODEL = "substitute_model"


@dataclass(frozen=True)
class TamperSpec:
    """What a node does differently from an honest prover.

    ``inference_batch`` lets a node pick its own batch; that alone is not a
    proof forgery (the inference proof stays sound), so it does not flip
    ``tampered``. ``strategy`` is a free label for metrics.
    """

    kind: TamperKind = TamperKind.NONE
    loss_offset: float = 0.0
    substitute_model: Optional[np.ndarray] = None
    inference_batch: Optional[Batch] = None
    strategy: Optional[str] = None

    @property
    def tampered(self) -> bool:
        return self.kind is not TamperKind.NONE


NO_TAMPER = TamperSpec()


@dataclass(frozen=True)
class EpochThresholds:
    epoch: int
    l_t: float
    b_t: float
    tau_max: float
    r: float = 1.8
    rho: float = 0.2

    @classmethod
    def bootstrap(cls, epoch: int = 0, r: float = 1.8, rho: float = 0.2) -> "EpochThresholds":
        return cls(epoch, 0.0, math.inf, 1.0, r, rho)

    @property
    def is_bootstrap(self) -> bool:
        return math.isinf(self.b_t)

    def for_epoch(self, epoch: int) -> "EpochThresholds":
        return EpochThresholds(epoch, self.l_t, self.b_t, self.tau_max, self.r, self.rho)


@dataclass(frozen=True)
class InferenceProof:
    statement: bytes


@dataclass(frozen=True)
class NormProof:
    claimed_norm: float
    prev_commit: Commitment


@dataclass(frozen=True)
class CosineProof:
    claimed_cosine: float


@dataclass(frozen=True)
class Witness:
    """Private inputs the simulated circuits run on."""

    task: Task
    inference_model: np.ndarray
    test_batch: Batch
    prev_model: np.ndarray
    probe: np.ndarray


def _statement(model_commit, test_commit, outputs_digest, declared_loss) -> bytes:
    h = hashlib.sha256(b"zkfl/pi")
    h.update(model_commit.digest)
    h.update(test_commit.digest)
    h.update(outputs_digest)
    h.update(struct.pack("<d", declared_loss))
    return h.digest()


@dataclass(frozen=True)
class ProofBundle:
    model_commit: Commitment
    test_commit: Commitment
    declared_outputs_digest: bytes
    declared_loss: float
    pi_tag: InferenceProof
    sigma_tag: Optional[NormProof]
    gamma_tag: Optional[CosineProof]
    author: int
    epoch: int
    honest_flag: bool = field(repr=False, default=True)
    witness: Optional[Witness] = field(repr=False, default=None, compare=False)

    def digest(self) -> bytes:
        """Hash of the public part, used inside block ids and event payloads."""
        h = hashlib.sha256(b"zkfl/bundle")
        h.update(self.model_commit.digest)
        h.update(self.test_commit.digest)
        h.update(self.declared_outputs_digest)
        h.update(struct.pack("<dqq", self.declared_loss, self.author, self.epoch))
        if self.sigma_tag is not None:
            h.update(struct.pack("<d", self.sigma_tag.claimed_norm))
            h.update(self.sigma_tag.prev_commit.digest)
        if self.gamma_tag is not None:
            h.update(struct.pack("<d", self.gamma_tag.claimed_cosine))
        return h.digest()


def update_stats(task: Task, model, prev_model, probe) -> tuple:
    """(update norm, embedding cosine) of moving from ``prev_model`` to ``model``."""
    norm = float(np.linalg.norm(np.asarray(model) - np.asarray(prev_model)))
    cos = cosine(task.embedding(prev_model, probe), task.embedding(model, probe))
    return norm, cos


def make_bundle(task: Task, author: int, epoch: int, model, prev_model, test_batch: Batch,
                probe, extended: bool, tamper: TamperSpec = NO_TAMPER) -> ProofBundle:
    model = np.asarray(model, dtype=float)
    prev_model = np.asarray(prev_model, dtype=float)
    batch = tamper.inference_batch if tamper.inference_batch is not None else test_batch
    used = model
    if tamper.kind is TamperKind.SUBSTITUTE_MODEL:
        used = np.asarray(tamper.substitute_model, dtype=float)

    outputs = task.outputs(used, batch.features)
    true_loss = task.loss(used, batch.features, batch.labels)
    declared = true_loss
    if tamper.kind is TamperKind.FAKE_LOSS:
        declared = max(0.0, true_loss + tamper.loss_offset)

    model_commit = commit(model, MODEL_TAG)
    test_commit = commit(batch, TEST_TAG)
    outputs_digest = commit(outputs, OUTPUTS_TAG).digest
    pi = InferenceProof(_statement(model_commit, test_commit, outputs_digest, declared))

    sigma = gamma = None
    if extended:
        norm, cos = update_stats(task, model, prev_model, probe)
        sigma = NormProof(norm, commit(prev_model, MODEL_TAG))
        gamma = CosineProof(cos)

    return ProofBundle(
        model_commit=model_commit,
        test_commit=test_commit,
        declared_outputs_digest=outputs_digest,
        declared_loss=declared,
        pi_tag=pi,
        sigma_tag=sigma,
        gamma_tag=gamma,
        author=author,
        epoch=epoch,
        honest_flag=not tamper.tampered,
        witness=Witness(task, used, batch, prev_model, probe),
    )


def verify_bundle(bundle: ProofBundle, thresholds: EpochThresholds, extended: bool) -> Verdict:
    """Inference check, then norm window, then cosine ceiling. First failure wins."""
    w = bundle.witness
    if w is None:
        return Verdict(RejectReason.COMMITMENT_MISMATCH)

    # (1) inference: the witness must open both commitments, then reproduce outputs and loss
    if commit(w.inference_model, MODEL_TAG) != bundle.model_commit:
        return Verdict(RejectReason.COMMITMENT_MISMATCH)
    if commit(w.test_batch, TEST_TAG) != bundle.test_commit:
        return Verdict(RejectReason.COMMITMENT_MISMATCH)
    outputs = w.task.outputs(w.inference_model, w.test_batch.features)
    if commit(outputs, OUTPUTS_TAG).digest != bundle.declared_outputs_digest:
        return Verdict(RejectReason.INFERENCE_MISMATCH)
    loss = w.task.loss(w.inference_model, w.test_batch.features, w.test_batch.labels)
    if abs(loss - bundle.declared_loss) > LOSS_TOLERANCE * max(1.0, abs(loss)):
        return Verdict(RejectReason.INFERENCE_MISMATCH)
    expected = _statement(bundle.model_commit, bundle.test_commit,
                          bundle.declared_outputs_digest, bundle.declared_loss)
    if bundle.pi_tag is None or bundle.pi_tag.statement != expected:
        return Verdict(RejectReason.INFERENCE_MISMATCH)

    if not extended:
        return ACCEPT
    if bundle.sigma_tag is None or bundle.gamma_tag is None:
        return Verdict(RejectReason.MISSING_EXTENDED_PROOFS)
    if commit(w.prev_model, MODEL_TAG) != bundle.sigma_tag.prev_commit:
        return Verdict(RejectReason.COMMITMENT_MISMATCH)

    norm, cos = update_stats(w.task, w.inference_model, w.prev_model, w.probe)

    # (2) both the claimed and the recomputed norm must sit in the window
    for value in (bundle.sigma_tag.claimed_norm, norm):
        if value < thresholds.l_t:
            return Verdict(RejectReason.NORM_BELOW_LOWER)
    for value in (bundle.sigma_tag.claimed_norm, norm):
        if value > thresholds.b_t:
            return Verdict(RejectReason.NORM_ABOVE_UPPER)

    # (3) semantic change: too similar to the previous model means a stall
    if bundle.gamma_tag.claimed_cosine > thresholds.tau_max or cos > thresholds.tau_max:
        return Verdict(RejectReason.COSINE_TOO_HIGH)
    return ACCEPT


def detect_replay(bundle: ProofBundle, history: Mapping[int, Sequence[Commitment]]) -> bool:
    """True iff the author has committed to exactly this model before."""
    return bundle.model_commit in set(history.get(bundle.author, ()))


def nearest_rank(values: Sequence[float], percent: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(Fraction(percent) * len(ordered) / 100))
    return ordered[rank - 1]


def compute_thresholds(prev_norms: Sequence[float], prev_cosines: Sequence[float],
                       r: float = 1.8, rho: float = 0.2, epoch: int = 0,
                       bootstrap: Optional[EpochThresholds] = None,
                       tau_margin: float = 1.0) -> EpochThresholds:
    """Norm window from the median update norm, cosine ceiling from the 95th percentile.

    ``tau_margin`` below one moves the ceiling towards one: the published
    value is ``1 - tau_margin * (1 - p95)``. An empty input falls back to the
    matching field of ``bootstrap``; without one it is an error.
    """
    if not (0.0 < rho < 1.0 < r):
        raise ValueError("need 0 < rho < 1 < r")
    if not 0.0 < tau_margin <= 1.0:
        raise ValueError("tau_margin must lie in (0, 1]")
    if (not prev_norms or not prev_cosines) and bootstrap is None:
        raise InsufficientHistory(f"no confirmed bundles before epoch {epoch}")
    if prev_norms:
        b_t = r * statistics.median(prev_norms)
        l_t = rho * b_t
    else:
        b_t, l_t = bootstrap.b_t, bootstrap.l_t
    if prev_cosines:
        p95 = nearest_rank(prev_cosines, 95.0)
        tau = p95 + (1.0 - tau_margin) * (1.0 - p95)
    else:
        tau = bootstrap.tau_max
    return EpochThresholds(epoch, float(l_t), float(b_t), float(tau), r, rho)


# reasons whose bundles still count towards the next thresholds: the update
# looked like real progress, it just fell outside the current window
_STATS_REASONS = frozenset({RejectReason.NORM_ABOVE_UPPER, RejectReason.COSINE_TOO_HIGH})


def counts_towards_thresholds(verdict: Verdict) -> bool:
    return verdict.accepted or verdict.reason in _STATS_REASONS


def threshold_inputs(samples: Sequence[tuple], band: float = 0.1) -> tuple:
    """Split ``(norm, cosine)`` samples into the two lists ``compute_thresholds`` takes.

    Every norm is kept. A cosine is dropped when its distance from one is
    below ``band`` times the median distance: such a score is far more
    stable than the bulk of the population and would otherwise drag the
    percentile up to a stalling node's level.
    """
    norms = [float(n) for n, _ in samples]
    if not samples:
        return norms, []
    gaps = [1.0 - float(c) for _, c in samples]
    floor = band * statistics.median(gaps)
    cosines = [float(c) for (_, c), g in zip(samples, gaps) if g >= floor]
    return norms, cosines
