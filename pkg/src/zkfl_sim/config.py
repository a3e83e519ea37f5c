"""Scenario configuration: one flat record, loaded from a YAML mapping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional

import yaml

from .behaviors import BehaviorKind
from .errors import ConfigError
from .oracle import ByzantinePolicy

TASKS = ("TaskA", "TaskB")
BASELINES = ("full", "uniform")


def rounded_count(n: int, fraction: float) -> int:
    """[n * fraction] rounded half-up, computed in decimal so 15 * 0.1 is 1.5 exactly."""
    exact = Decimal(n) * Decimal(repr(fraction))
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ScenarioConfig:
    # population
    n: int = 15
    gamma: float = 0.0
    mu: float = 0.0
    stealth_nodes: int = 0
    lazy_kind: str = "lazy_replay"
    lazy_skip_prob: float = 1.0
    adversary_kind: str = "utility_poison"
    adversary_orphanage: bool = True
    adversary_fake_loss: float = 0.0
    adversary_last_epoch: int = -1
    # run control
    epochs_max: int = 200
    seed: int = 0
    stop_on_convergence: bool = True
    epsilon: float = 1e-3
    baseline: str = "full"
    # learning
    task: str = "TaskA"
    samples_per_node: int = 250
    lr: float = 0.01
    local_steps: int = 5
    batch_size: int = 50
    probe_size: int = 400
    # ledger
    k_t: int = 8
    k_v: int = 4
    confirm_threshold: float = 0.5
    genesis_count: Optional[int] = None
    # validation
    extended_checks: bool = True
    r: float = 1.8
    rho: float = 0.2
    grace_epochs: int = 2
    threshold_window: int = 5
    threshold_warmup: int = 3
    cosine_band: float = 0.1
    tau_margin: float = 0.5
    proof_delay_prob: float = 0.0
    proof_delay_max: int = 3
    # committee and stake
    oracle_m: int = 4
    oracle_f: int = 1
    oracle_byzantine: int = 0
    byzantine_policy: str = "invert-truth"
    slash_fraction: float = 0.5
    accrual_rate: float = 0.05
    slash_rejected: bool = True
    challenge_stake_fraction: float = 0.1
    # simulated time
    bandwidth_mbps_min: float = 10.0
    bandwidth_mbps_max: float = 50.0
    latency_ms_min: float = 50.0
    latency_ms_max: float = 200.0
    train_op_time_s: float = 1e-6
    verify_time_s: float = 0.02
    extended_verify_time_s: float = 0.01
    proof_bytes: int = 512

    # derived ------------------------------------------------------------------
    @property
    def n_lazy(self) -> int:
        return rounded_count(self.n, self.gamma)

    @property
    def n_adversarial(self) -> int:
        return rounded_count(self.n, self.mu)

    @property
    def genesis(self) -> int:
        return self.k_v if self.genesis_count is None else self.genesis_count

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "ScenarioConfig":
        def need(ok, name, message):
            if not ok:
                raise ConfigError(name, message)

        need(self.n >= 1, "n", "need at least one node")
        for name in ("gamma", "mu", "lazy_skip_prob", "proof_delay_prob"):
            need(0.0 <= getattr(self, name) <= 1.0, name, "must lie in [0, 1]")
        need(self.stealth_nodes >= 0, "stealth_nodes", "must be non-negative")
        need(self.n_lazy + self.n_adversarial + self.stealth_nodes <= self.n, "mu",
             "lazy, adversarial and stealth nodes exceed n")
        kinds = {k.value for k in BehaviorKind}
        need(self.lazy_kind in kinds, "lazy_kind", f"one of {sorted(kinds)}")
        need(self.adversary_kind in kinds, "adversary_kind", f"one of {sorted(kinds)}")
        need(self.adversary_fake_loss >= 0.0, "adversary_fake_loss", "must be non-negative")
        need(self.epochs_max >= 0, "epochs_max", "must be non-negative")
        need(self.epsilon > 0.0, "epsilon", "must be positive")
        need(self.baseline in BASELINES, "baseline", f"one of {BASELINES}")
        need(self.task in TASKS, "task", f"one of {TASKS}")
        need(self.samples_per_node >= 5, "samples_per_node", "need at least 5 samples")
        need(self.lr >= 0.0, "lr", "must be non-negative")
        need(self.local_steps >= 0, "local_steps", "must be non-negative")
        need(self.batch_size >= 1, "batch_size", "must be positive")
        need(self.probe_size >= 1, "probe_size", "must be positive")
        need(self.k_t >= 1, "k_t", "must be positive")
        need(self.k_v >= 1, "k_v", "must be positive")
        need(0.0 < self.confirm_threshold <= 1.0, "confirm_threshold", "must lie in (0, 1]")
        need(self.genesis >= 1, "genesis_count", "must be positive")
        need(0.0 < self.rho < 1.0 < self.r, "rho", "need 0 < rho < 1 < r")
        need(self.threshold_window >= 1, "threshold_window", "must be positive")
        need(self.threshold_warmup >= 0, "threshold_warmup", "must be non-negative")
        need(0.0 < self.tau_margin <= 1.0, "tau_margin", "must lie in (0, 1]")
        need(0.0 <= self.cosine_band < 1.0, "cosine_band", "must lie in [0, 1)")
        need(self.grace_epochs >= 0, "grace_epochs", "must be non-negative")
        need(self.proof_delay_max >= 0, "proof_delay_max", "must be non-negative")
        need(self.oracle_f >= 0, "oracle_f", "must be non-negative")
        need(self.oracle_m >= 3 * self.oracle_f + 1, "oracle_m", "need M >= 3f+1")
        need(0 <= self.oracle_byzantine <= self.oracle_f, "oracle_byzantine",
             "between 0 and f byzantine members")
        policies = {p.value for p in ByzantinePolicy}
        need(self.byzantine_policy in policies, "byzantine_policy", f"one of {sorted(policies)}")
        need(0.0 < self.slash_fraction < 1.0, "slash_fraction", "must lie in (0, 1)")
        need(self.accrual_rate >= 0.0, "accrual_rate", "must be non-negative")
        need(0.0 <= self.challenge_stake_fraction <= 1.0, "challenge_stake_fraction",
             "must lie in [0, 1]")
        need(0.0 < self.bandwidth_mbps_min <= self.bandwidth_mbps_max, "bandwidth_mbps_min",
             "need 0 < min <= max")
        need(0.0 <= self.latency_ms_min <= self.latency_ms_max, "latency_ms_min",
             "need 0 <= min <= max")
        for name in ("train_op_time_s", "verify_time_s", "extended_verify_time_s"):
            need(getattr(self, name) >= 0.0, name, "must be non-negative")
        need(self.proof_bytes >= 0, "proof_bytes", "must be non-negative")
        return self


def _coerce(field, value):
    name, typ = field.name, field.type
    if typ in ("int", "Optional[int]"):
        if value is None and typ == "Optional[int]":
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if typ == "bool":
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true or false, got {value!r}")
        return value
    if typ == "str":
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    raise ConfigError(name, f"unsupported field type {typ}")


def config_from_mapping(mapping: dict) -> ScenarioConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("<document>", "scenario must be a flat key/value mapping")
    known = {f.name: f for f in fields(ScenarioConfig)}
    values = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(str(key), "unknown key")
        values[key] = _coerce(known[key], value)
    return ScenarioConfig(**values).validate()


def load_scenario(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from exc
    return config_from_mapping({} if mapping is None else mapping)
