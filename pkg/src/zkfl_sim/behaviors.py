"""Node strategies: what update a node submits and which parents it names."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np

from .ledger import BlockStatus, DagLedger
from .learning import Batch, LocalDataset, Task, local_train
from .proofs import NO_TAMPER, EpochThresholds, TamperKind, TamperSpec


class BehaviorKind(Enum):
    HONEST = "honest"
    LAZY_REPLAY = "lazy_replay"
    PERTURB_REPLAY = "perturb_replay"
    MINIMAL_NORM_STALL = "minimal_norm_stall"
    SEMANTIC_STALL = "semantic_stall"
    UTILITY_POISON = "utility_poison"
    ORPHANAGE_ATTACKER = "orphanage_attacker"


STEALTH_KINDS = (BehaviorKind.PERTURB_REPLAY, BehaviorKind.MINIMAL_NORM_STALL,
                 BehaviorKind.SEMANTIC_STALL)

DEFAULT_PARAMS = {
    BehaviorKind.LAZY_REPLAY: {"skip_prob": 1.0, "max_lag": 3},
    BehaviorKind.PERTURB_REPLAY: {"max_lag": 3, "sigma_factor": 1e-5},
    BehaviorKind.MINIMAL_NORM_STALL: {"slack": 0.01},
    BehaviorKind.SEMANTIC_STALL: {"blend": 0.05},
    BehaviorKind.UTILITY_POISON: {"epsilon": 0.01, "directions": 20, "noise_scale": 10.0,
                                  "bisection_steps": 30, "fake_loss": 0.0},
    BehaviorKind.ORPHANAGE_ATTACKER: {"fake_loss": 0.3},
}


@dataclass(frozen=True)
class Behavior:
    kind: BehaviorKind = BehaviorKind.HONEST
    orphanage: bool = False
    params: Mapping = field(default_factory=dict)

    def param(self, name):
        if name in self.params:
            return self.params[name]
        return DEFAULT_PARAMS[self.kind][name]

    @property
    def builds_orphan_chains(self) -> bool:
        return self.orphanage or self.kind is BehaviorKind.ORPHANAGE_ATTACKER

    @property
    def is_honest(self) -> bool:
        return self.kind is BehaviorKind.HONEST and not self.orphanage


@dataclass(eq=False)
class NodeState:
    index: int
    behavior: Behavior
    data: LocalDataset
    start_model: np.ndarray
    history: list = field(default_factory=list)
    colluders: tuple = ()


@dataclass(frozen=True)
class TrainingSetup:
    task: Task
    probe: np.ndarray
    lr: float = 0.01
    steps: int = 5
    batch_size: int = 50
    inference_size: int = 10


def act(behavior: Behavior, node: NodeState, global_model, thresholds: EpochThresholds,
        rng, setup: TrainingSetup):
    """Return ``(update, tamper)`` for this epoch.

    ``node.start_model`` is the model this epoch starts from (the node's own
    aggregate); the norm and cosine checks compare against it.
    ``node.history`` lists this node's past submissions, oldest first.
    """
    kind = behavior.kind

    def honest():
        return local_train(setup.task, global_model, node.data, setup.steps,
                           setup.batch_size, setup.lr, rng)

    if kind is BehaviorKind.HONEST:
        return honest(), NO_TAMPER

    if kind is BehaviorKind.LAZY_REPLAY:
        if not node.history or rng.random() >= behavior.param("skip_prob"):
            return honest(), NO_TAMPER
        lag = int(rng.integers(1, min(behavior.param("max_lag"), len(node.history)) + 1))
        return node.history[-lag].copy(), TamperSpec(strategy=kind.value)

    if kind is BehaviorKind.PERTURB_REPLAY:
        if not node.history:
            return honest(), NO_TAMPER
        lag = int(rng.integers(1, min(behavior.param("max_lag"), len(node.history)) + 1))
        base = node.history[-lag]
        sigma = behavior.param("sigma_factor") * np.linalg.norm(base)
        return base + rng.normal(0.0, sigma, size=base.shape), TamperSpec(strategy=kind.value)

    if kind is BehaviorKind.MINIMAL_NORM_STALL:
        return minimal_norm_step(setup, node, thresholds, behavior.param("slack"), rng), \
            TamperSpec(strategy=kind.value)

    if kind is BehaviorKind.SEMANTIC_STALL:
        update = semantic_stall(setup, node, honest(), thresholds, behavior.param("blend"))
        friendly = friendliest_batch(setup.task, update, node.data.test, setup.inference_size)
        return update, TamperSpec(inference_batch=friendly, strategy=kind.value)

    if kind is BehaviorKind.UTILITY_POISON:
        trained = honest()
        cap = None if math.isinf(thresholds.b_t) else thresholds.b_t
        poisoned = utility_preserving_poison(
            setup.task, trained, node.data.test, rng,
            epsilon=behavior.param("epsilon"),
            n_directions=behavior.param("directions"),
            max_scale=behavior.param("noise_scale") * max(np.linalg.norm(trained), 1e-12),
            reference=node.start_model, norm_cap=cap,
            steps=behavior.param("bisection_steps"))
        return poisoned, _fake_loss_tamper(behavior, kind)

    if kind is BehaviorKind.ORPHANAGE_ATTACKER:
        return honest(), _fake_loss_tamper(behavior, kind)

    raise ValueError(f"unhandled behavior {kind}")


def _fake_loss_tamper(behavior: Behavior, kind: BehaviorKind) -> TamperSpec:
    offset = behavior.param("fake_loss")
    if offset > 0:
        return TamperSpec(TamperKind.FAKE_LOSS, loss_offset=-offset, strategy=kind.value)
    return TamperSpec(strategy=kind.value)


def minimal_norm_step(setup: TrainingSetup, node: NodeState, thresholds: EpochThresholds,
                      slack: float, rng) -> np.ndarray:
    """One SGD step from the epoch's starting model, shrunk to just under L_t."""
    task = setup.task
    data = node.data.train
    idx = rng.choice(len(data), size=min(setup.batch_size, len(data)), replace=False)
    step = -setup.lr * task.gradient(node.start_model, data.features[idx], data.labels[idx])
    size = np.linalg.norm(step)
    if thresholds.l_t > 0.0 and size > 0.0:
        step = step * ((1.0 - slack) * thresholds.l_t / size)
    return node.start_model + step


def semantic_stall(setup: TrainingSetup, node: NodeState, trained, thresholds: EpochThresholds,
                   blend: float) -> np.ndarray:
    """Move only a little towards fresh training, then pad the norm.

    The padding rescales the blended model in a way that keeps the probe
    embedding's direction, so the norm window is met while the cosine to the
    previous model stays close to one.
    """
    task = setup.task
    prev = node.start_model
    blended = prev + blend * (trained - prev)
    if math.isinf(thresholds.b_t):
        return blended
    target = 0.5 * (thresholds.l_t + thresholds.b_t)
    if np.linalg.norm(blended - prev) >= target:
        return blended

    def gap(scale):
        return np.linalg.norm(task.reparametrize(blended, scale) - prev) - target

    lo, hi = 1.0, 2.0
    while gap(hi) < 0 and hi < 1e6:
        lo, hi = hi, hi * 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    return task.reparametrize(blended, hi)


def friendliest_batch(task: Task, model, pool: Batch, size: int) -> Batch:
    """The ``size`` samples of ``pool`` on which ``model`` looks best."""
    losses = task.sample_losses(model, pool.features, pool.labels)
    idx = np.sort(np.argsort(losses, kind="stable")[:size])
    return Batch(pool.features[idx], pool.labels[idx])


def utility_preserving_poison(task: Task, trained, reference_batch: Batch, rng, *,
                              epsilon: float = 0.01, n_directions: int = 20,
                              max_scale: float = 10.0, reference=None,
                              norm_cap: Optional[float] = None, steps: int = 30,
                              directions: Optional[np.ndarray] = None) -> np.ndarray:
    """Largest displacement along random directions that keeps accuracy.

    Accuracy on ``reference_batch`` may drop by at most ``epsilon`` relative
    to ``trained``. With ``norm_cap`` the update relative to ``reference``
    also stays inside the published upper norm bound.
    """
    floor = task.accuracy(trained, reference_batch.features, reference_batch.labels) - epsilon
    if directions is None:
        directions = rng.normal(size=(n_directions, len(trained)))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)

    def feasible(candidate):
        if norm_cap is not None and np.linalg.norm(candidate - reference) > norm_cap:
            return False
        return task.accuracy(candidate, reference_batch.features,
                             reference_batch.labels) >= floor - 1e-12

    best_scale, best = 0.0, np.array(trained, dtype=float)
    for u in directions:
        if feasible(trained + max_scale * u):
            lo = max_scale
        else:
            lo, hi = 0.0, max_scale
            for _ in range(steps):
                mid = 0.5 * (lo + hi)
                if feasible(trained + mid * u):
                    lo = mid
                else:
                    hi = mid
        if lo > best_scale:
            best_scale, best = lo, trained + lo * u
    return best


def choose_parents(behavior: Behavior, node: NodeState, honest_choice: list,
                   ledger: DagLedger, k_v: int, epoch: int) -> list:
    """Orphanage attackers favour their coalition's own latest blocks."""
    if not behavior.builds_orphan_chains:
        return list(honest_choice)
    coalition = (node.index,) + tuple(c for c in node.colluders if c != node.index)
    rank = {a: i for i, a in enumerate(coalition)}
    own = [
        b for b in ledger.blocks.values()
        if b.author in rank and b.epoch < epoch and b.status is not BlockStatus.REVOKED
    ]
    own.sort(key=lambda b: (-b.epoch, rank[b.author], b.id))
    chosen = [b.id for b in own[:k_v]]
    for bid in honest_choice:
        if len(chosen) >= k_v:
            break
        if bid not in chosen:
            chosen.append(bid)
    return chosen
