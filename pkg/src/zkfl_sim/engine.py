"""Epoch loop: train, prove, validate, submit, challenge, aggregate, reward."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .behaviors import (
    STEALTH_KINDS,
    Behavior,
    BehaviorKind,
    NodeState,
    TrainingSetup,
    act,
    choose_parents,
)
from .config import ScenarioConfig
from .errors import IoError, SimulationError
from .ledger import Block, BlockStatus, DagLedger, block_id
from .learning import MLPTask, check_convergence, make_local_dataset, make_task
from .oracle import ByzantinePolicy, Held, OracleRegistry, StakeVector
from .proofs import (
    EpochThresholds,
    RejectReason,
    compute_thresholds,
    counts_towards_thresholds,
    make_bundle,
    threshold_inputs,
)
from .sidechain import EventKind, Sidechain

CSV_HEADER = ("epoch", "loss", "accuracy", "submitted", "accepted", "rejected_inference",
              "rejected_norm", "rejected_cosine", "rejected_replay", "challenges", "revoked",
              "honest_stake_share")

# reject reasons folded into each CSV column
REASON_COLUMN = {
    RejectReason.COMMITMENT_MISMATCH: "rejected_inference",
    RejectReason.INFERENCE_MISMATCH: "rejected_inference",
    RejectReason.MISSING_EXTENDED_PROOFS: "rejected_inference",
    RejectReason.NORM_BELOW_LOWER: "rejected_norm",
    RejectReason.NORM_ABOVE_UPPER: "rejected_norm",
    RejectReason.COSINE_TOO_HIGH: "rejected_cosine",
    RejectReason.REPLAY: "rejected_replay",
}

# independent random streams, one id per purpose; node streams add the node index
_STREAMS = {"task": 1, "data": 2, "probe": 3, "init": 4, "roles": 5, "network": 6,
            "train": 7, "inference": 8, "tips": 9, "delay": 10, "latency": 11}


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    submitted: int = 0
    accepted: int = 0
    rejected_inference: int = 0
    rejected_norm: int = 0
    rejected_cosine: int = 0
    rejected_replay: int = 0
    challenges: int = 0
    challenges_won: int = 0
    challenges_lost: int = 0
    revoked: int = 0
    honest_stake_share: float = 0.0
    stake_sum: float = 1.0
    stakes: list = field(default_factory=list)
    idle_nodes: list = field(default_factory=list)
    perplexity: Optional[float] = None
    latency_s: float = 0.0
    aggregation_violations: int = 0
    thresholds: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [getattr(self, name) for name in CSV_HEADER]


@dataclass
class Metrics:
    config: dict
    roles: dict
    epochs: list = field(default_factory=list)
    epochs_to_convergence: Optional[int] = None
    stealth_detection: dict = field(default_factory=dict)
    events_ndjson: Optional[str] = None

    @property
    def latency_mean_s(self) -> float:
        if not self.epochs:
            return 0.0
        return float(np.mean([e.latency_s for e in self.epochs]))

    @property
    def throughput_rounds_per_min(self) -> float:
        mean = self.latency_mean_s
        return 60.0 / mean if mean > 0 else 0.0

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.epochs[-1].accuracy if self.epochs else None

    def summary(self) -> dict:
        totals = {name: sum(getattr(e, name) for e in self.epochs) for name in
                  ("submitted", "accepted", "rejected_inference", "rejected_norm",
                   "rejected_cosine", "rejected_replay", "challenges", "challenges_won",
                   "challenges_lost", "revoked", "aggregation_violations")}
        last = self.epochs[-1] if self.epochs else None
        return {
            "epochs_run": len(self.epochs),
            "epochs_to_convergence": self.epochs_to_convergence,
            "final_loss": last.loss if last else None,
            "final_accuracy": last.accuracy if last else None,
            "final_perplexity_analog": last.perplexity if last else None,
            "final_honest_stake_share": last.honest_stake_share if last else None,
            "final_stakes": last.stakes if last else None,
            "latency_mean_s": self.latency_mean_s,
            "throughput_rounds_per_min": self.throughput_rounds_per_min,
            "totals": totals,
            "stealth_detection": self.stealth_detection,
            "roles": {str(k): v for k, v in self.roles.items()},
            "per_epoch": [
                {"epoch": e.epoch, "perplexity_analog": e.perplexity, "latency_s": e.latency_s,
                 "challenges_won": e.challenges_won, "challenges_lost": e.challenges_lost,
                 "idle_nodes": e.idle_nodes, "stakes": e.stakes, "thresholds": e.thresholds}
                for e in self.epochs
            ],
            "config": self.config,
        }


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


class Simulation:
    def __init__(self, config: ScenarioConfig):
        self.config = config.validate()
        cfg = self.config
        self.full = cfg.baseline == "full"
        self.extended = cfg.extended_checks and self.full

        self.task = make_task(cfg.task, self._rng("task"))
        self.probe = self.task.sample_features(self._rng("probe"), cfg.probe_size)
        self.initial_model = self.task.init_params(self._rng("init"))
        datasets = [make_local_dataset(self.task, self._rng("data", j), cfg.samples_per_node)
                    for j in range(cfg.n)]
        self.setup = TrainingSetup(
            self.task, self.probe, cfg.lr, cfg.local_steps, cfg.batch_size,
            inference_size=max(1, int(round(0.2 * len(datasets[0].test)))))

        self.behaviors = self._assign_roles()
        coalition = tuple(j for j, b in enumerate(self.behaviors) if b.builds_orphan_chains)
        self.nodes = [
            NodeState(j, self.behaviors[j], datasets[j], self.initial_model.copy(),
                      colluders=coalition if j in coalition else ())
            for j in range(cfg.n)
        ]
        self.honest_nodes = [j for j, b in enumerate(self.behaviors) if b.is_honest]

        self.ledger = DagLedger(cfg.confirm_threshold)
        self.registry = OracleRegistry(
            list(range(cfg.oracle_m)), cfg.oracle_f,
            frozenset(range(cfg.oracle_byzantine)), ByzantinePolicy(cfg.byzantine_policy))
        self.chain = Sidechain(self.registry, self.ledger, cfg.n, StakeVector.uniform(cfg.n),
                               self.initial_model, extended=self.extended,
                               validation=self.full, k_v=cfg.k_v)
        self.ledger.insert_genesis(cfg.genesis, self.initial_model,
                                   stake_view=lambda: self.chain.stakes.weights)

        self.global_model = self.initial_model.copy()
        self.node_globals = [self.initial_model.copy() for _ in range(cfg.n)]
        self.streams = {name: [self._rng(name, j) for j in range(cfg.n)]
                        for name in ("train", "inference", "tips", "delay", "latency")}
        bw = self._rng("network").uniform(cfg.bandwidth_mbps_min, cfg.bandwidth_mbps_max, cfg.n)
        self.bandwidth_bps = bw * 1e6

        self.thresholds = EpochThresholds.bootstrap(0, cfg.r, cfg.rho)
        self.threshold_samples: dict = {}  # epoch -> [(norm, cosine)]
        self.loss_history: list = []
        self.tamper_of: dict = {}
        self.metrics = Metrics(cfg.to_dict(), {j: self._role_name(b) for j, b in
                                                enumerate(self.behaviors)})
        self.epoch = 0
        all_train = [d.train for d in datasets]
        all_test = [d.test for d in datasets]
        self._train_x = np.concatenate([b.features for b in all_train])
        self._train_y = np.concatenate([b.labels for b in all_train])
        self._test_x = np.concatenate([b.features for b in all_test])
        self._test_y = np.concatenate([b.labels for b in all_test])

    # setup helpers ------------------------------------------------------------
    def _rng(self, name, *index):
        seq = np.random.SeedSequence(self.config.seed, spawn_key=(_STREAMS[name],) + index)
        return np.random.default_rng(seq)

    def _assign_roles(self) -> list:
        cfg = self.config
        order = self._rng("roles").permutation(cfg.n)
        behaviors = [Behavior() for _ in range(cfg.n)]
        at = 0
        lazy = Behavior(BehaviorKind(cfg.lazy_kind), params={"skip_prob": cfg.lazy_skip_prob}
                        if cfg.lazy_kind == BehaviorKind.LAZY_REPLAY.value else {})
        for _ in range(cfg.n_lazy):
            behaviors[order[at]] = lazy
            at += 1
        adv_kind = BehaviorKind(cfg.adversary_kind)
        adv_params = {}
        if adv_kind in (BehaviorKind.UTILITY_POISON, BehaviorKind.ORPHANAGE_ATTACKER) \
                and cfg.adversary_fake_loss > 0:
            adv_params["fake_loss"] = cfg.adversary_fake_loss
        adversary = Behavior(adv_kind, orphanage=cfg.adversary_orphanage, params=adv_params)
        for _ in range(cfg.n_adversarial):
            behaviors[order[at]] = adversary
            at += 1
        for i in range(cfg.stealth_nodes):
            behaviors[order[at]] = Behavior(STEALTH_KINDS[i % len(STEALTH_KINDS)])
            at += 1
        return behaviors

    @staticmethod
    def _role_name(b: Behavior) -> str:
        name = b.kind.value
        if b.orphanage and b.kind is not BehaviorKind.ORPHANAGE_ATTACKER:
            name += "+orphanage"
        return name

    # evaluation -------------------------------------------------------------------
    def _evaluate(self, model):
        loss = self.task.loss(model, self._train_x, self._train_y)
        acc = self.task.accuracy(model, self._test_x, self._test_y)
        ppl = None
        if isinstance(self.task, MLPTask):
            ppl = self.task.perplexity(model, self._test_x, self._test_y)
        return loss, acc, ppl

    def _adversary_active(self, j: int, t: int) -> bool:
        last = self.config.adversary_last_epoch
        return not (self.behaviors[j].builds_orphan_chains and 0 <= last < t)

    # epoch ----------------------------------------------------------------------------
    def run_epoch(self) -> EpochRecord:
        cfg, chain, ledger = self.config, self.chain, self.ledger
        t = self.epoch
        thresholds = self.thresholds.for_epoch(t)
        chain.publish_thresholds(thresholds)
        snapshot = ledger.sorted_tips()
        record = EpochRecord(t, 0.0, 0.0, thresholds={
            "l_t": thresholds.l_t, "b_t": thresholds.b_t, "tau_max": thresholds.tau_max})
        revoked_before = sum(b.status is BlockStatus.REVOKED for b in ledger.blocks.values())
        submitted_by = {}
        round_times = []

        # stage 1-2: train, prove, pick parents, submit
        for j, node in enumerate(self.nodes):
            delay = self._proof_delay(j)
            if delay > cfg.grace_epochs or not self._adversary_active(j, t):
                record.idle_nodes.append(j)
                continue
            behavior = self.behaviors[j]
            node.start_model = self.node_globals[j]
            update, tamper = act(behavior, node, self.node_globals[j], thresholds,
                                 self.streams["train"][j], self.setup)
            batch = node.data.inference_batch(self.streams["inference"][j])
            bundle = make_bundle(self.task, j, t, update, node.start_model, batch, self.probe,
                                 self.extended, tamper)
            chain.post_bundle(bundle)
            ready = chain.emit(EventKind.ZKP_READY, j, {
                "node": j, "epoch": t, "model_commit": bundle.model_commit.hex(),
                "test_commit": bundle.test_commit.hex(), "declared_loss": bundle.declared_loss})
            if isinstance(ready, Held):
                continue
            candidates = ledger.select_tips_random(cfg.k_t, self.streams["tips"][j], pool=snapshot)
            honest_choice = chain.s1[j].validate(candidates, cfg.k_v)
            parents = choose_parents(behavior, node, honest_choice, ledger, cfg.k_v, t)
            bid = block_id(j, t, update, bundle.digest(), parents)
            block = Block(bid, j, t, update, bundle, parents)
            sel = chain.emit(EventKind.PARENTS_SELECTED, j, {
                "node": j, "epoch": t, "block_id": bid.hex(), "parents": [p.hex() for p in parents]})
            if isinstance(sel, Held):
                continue
            if delay > 0:
                chain.verifier.ready_at[bid] = t + delay
            chain.s2[j].submit(block)
            chain.emit(EventKind.BLOCK_SUBMITTED, j, {"node": j, "epoch": t, "block_id": bid.hex()})
            node.history.append(update)
            submitted_by[j] = bid
            self.tamper_of[bid] = tamper
            self._count_verdict(record, bid, tamper)
            round_times.append(self._round_time(j))

        # stage 3: reachability analysis and challenges by honest validators
        if self.full:
            for j in self.honest_nodes:
                if j in record.idle_nodes:
                    continue
                self._maybe_challenge(j, t, record)

        # stage 4: aggregation, then rewards
        reference = None
        for j in range(cfg.n):
            if j in record.idle_nodes:
                continue
            chain.emit(EventKind.TRAINER_AVAILABLE, j, {"node": j, "epoch": t})
            self.node_globals[j] = chain.s4[j].aggregate(uniform=not self.full)
            if reference is None:
                reference = self.node_globals[j]
        if reference is not None:
            self.global_model = reference
        for j in submitted_by:
            if self.full:
                chain.s5[j].reward(cfg.accrual_rate,
                                   cfg.slash_fraction if cfg.slash_rejected else None)
            else:
                chain.s5[j].reward(0.0, None)

        record.aggregation_violations = self._aggregation_violations(t)
        self.thresholds = self._next_thresholds(t, submitted_by)
        chain.end_epoch()

        record.submitted = len(submitted_by)
        record.revoked = sum(b.status is BlockStatus.REVOKED
                             for b in ledger.blocks.values()) - revoked_before
        stakes = chain.stakes
        record.stakes = [float(w) for w in stakes.weights]
        record.stake_sum = stakes.total()
        record.honest_stake_share = stakes.share(self.honest_nodes)
        record.loss, record.accuracy, record.perplexity = self._evaluate(self.global_model)
        record.latency_s = max(round_times) if round_times else 0.0
        self.metrics.epochs.append(record)
        self.loss_history.append(record.loss)
        self.epoch += 1
        return record

    def _proof_delay(self, j: int) -> int:
        cfg = self.config
        if cfg.proof_delay_prob <= 0.0 or cfg.proof_delay_max <= 0:
            return 0
        rng = self.streams["delay"][j]
        if rng.random() < cfg.proof_delay_prob:
            return int(rng.integers(1, cfg.proof_delay_max + 1))
        return 0

    def _count_verdict(self, record: EpochRecord, bid, tamper):
        verdict = self.chain.verifier.verdict(bid)
        if verdict.accepted:
            record.accepted += 1
        else:
            column = REASON_COLUMN[verdict.reason]
            setattr(record, column, getattr(record, column) + 1)
        if tamper.strategy in {k.value for k in STEALTH_KINDS}:
            counts = self.metrics.stealth_detection.setdefault(tamper.strategy, {})
            key = "accepted" if verdict.accepted else verdict.reason.value
            counts[key] = counts.get(key, 0) + 1

    def _maybe_challenge(self, j: int, t: int, record: EpochRecord):
        chain, ledger, verifier = self.chain, self.ledger, self.chain.verifier
        valid_tips = [b for b in ledger.sorted_tips() if verifier.eligible(b, t)]
        suspects = ledger.gra_find_suspects(valid_tips)
        targets = [
            bid for bid in sorted(suspects)
            if verifier.proof_ready(bid, t)
            and not verifier.verdict(bid).accepted
        ]
        if not targets:
            return
        event = chain.emit(EventKind.SUSPECT_DETECTED, j, {
            "node": j, "epoch": t, "suspects": [b.hex() for b in targets]})
        if isinstance(event, Held):
            return
        try:
            outcome = chain.s3[j].challenge(targets, self.config.challenge_stake_fraction,
                                            self.config.slash_fraction)
        except SimulationError:
            return
        record.challenges += 1
        if outcome.slashed:
            record.challenges_lost += 1
        else:
            record.challenges_won += 1

    def _aggregation_violations(self, t: int) -> int:
        if not self.full:
            return 0
        bad = 0
        for epoch, _, ids, _ in self.chain.aggregation_trace:
            if epoch != t:
                continue
            for bid in ids:
                block = self.ledger.get(bid)
                if block.status is BlockStatus.REVOKED or \
                        not self.chain.verifier.verdict(bid).accepted:
                    bad += 1
        return bad

    def _next_thresholds(self, t: int, submitted_by: dict) -> EpochThresholds:
        """Committee statistics over a trailing window of published bundles.

        Early epochs measure updates against the shared initial model and are
        skipped; with no usable sample the previous window is carried over.
        """
        cfg = self.config
        if not self.extended:
            return EpochThresholds.bootstrap(t + 1, cfg.r, cfg.rho)
        verifier = self.chain.verifier
        if t >= cfg.threshold_warmup:
            samples = []
            for bid in submitted_by.values():
                bundle = self.ledger.get(bid).bundle
                if verifier.proof_ready(bid, t) and counts_towards_thresholds(verifier.verdict(bid)):
                    samples.append((bundle.sigma_tag.claimed_norm, bundle.gamma_tag.claimed_cosine))
            self.threshold_samples[t] = samples
        pool = [s for e in range(t - cfg.threshold_window + 1, t + 1)
                for s in self.threshold_samples.get(e, ())]
        norms, cosines = threshold_inputs(pool, cfg.cosine_band)
        if not norms or not cosines:
            return self.thresholds.for_epoch(t + 1)
        return compute_thresholds(norms, cosines, cfg.r, cfg.rho, epoch=t + 1,
                                  tau_margin=cfg.tau_margin)

    def _round_time(self, j: int) -> float:
        cfg = self.config
        d = self.task.dim
        train = cfg.train_op_time_s * cfg.local_steps * cfg.batch_size * d
        block_bytes = 8 * d + cfg.proof_bytes
        transfer = (1 + cfg.k_t) * block_bytes * 8 / self.bandwidth_bps[j]
        latency = self.streams["latency"][j].uniform(cfg.latency_ms_min, cfg.latency_ms_max) / 1e3
        verify = cfg.k_t * (cfg.verify_time_s + (cfg.extended_verify_time_s if self.extended else 0))
        return float(train + transfer + latency + verify)

    # run --------------------------------------------------------------------------
    def run(self, epochs: Optional[int] = None, emit_events: bool = False) -> Metrics:
        limit = self.config.epochs_max if epochs is None else epochs
        while self.epoch < limit:
            self.run_epoch()
            if self.metrics.epochs_to_convergence is None and \
                    check_convergence(self.loss_history, self.config.epsilon):
                self.metrics.epochs_to_convergence = self.epoch
                if self.config.stop_on_convergence:
                    break
        if emit_events:
            self.metrics.events_ndjson = self.chain.export_ndjson()
        return self.metrics


def run_scenario(config: ScenarioConfig, emit_events: bool = False) -> Metrics:
    return Simulation(config).run(emit_events=emit_events)


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def epochs_csv(metrics: Metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for e in metrics.epochs:
        writer.writerow([_format(v) for v in e.csv_row()])
    return buf.getvalue()


def emit_outputs(metrics: Metrics, out_dir) -> list:
    out = Path(out_dir)
    files = {
        "epochs.csv": epochs_csv(metrics),
        "summary.json": json.dumps(_json_safe(metrics.summary()), indent=2, sort_keys=True) + "\n",
    }
    if metrics.events_ndjson is not None:
        files["events.ndjson"] = metrics.events_ndjson
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            path = out / name
            path.write_text(text)
            written.append(path)
    except OSError as exc:
        raise IoError(f"cannot write outputs to {out}: {exc.strerror}") from exc
    return written
