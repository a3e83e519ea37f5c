import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zkfl_sim.errors import InsufficientHistory
from zkfl_sim.learning import Batch, make_local_dataset, make_task
from zkfl_sim.proofs import (
    MODEL_TAG,
    EpochThresholds,
    RejectReason,
    TamperKind,
    TamperSpec,
    canonical_bytes,
    commit,
    compute_thresholds,
    counts_towards_thresholds,
    detect_replay,
    make_bundle,
    nearest_rank,
    threshold_inputs,
    update_stats,
    verify_bundle,
    Verdict,
)

from .oracles import brute_median, brute_nearest_rank

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(5)
    task = make_task("TaskA", rng)
    probe = task.sample_features(rng, 200)
    data = make_local_dataset(task, rng, 250)
    prev = task.init_params(rng)
    model = prev + rng.normal(0, 0.05, size=task.dim)
    return task, probe, data, prev, model


def _bundle(world, tamper=TamperSpec(), extended=True, model=None):
    task, probe, data, prev, default = world
    return make_bundle(task, 0, 1, default if model is None else model, prev, data.test, probe,
                       extended, tamper)


def _window_for(world, slack=2.0):
    task, probe, _, prev, model = world
    norm, cos = update_stats(task, model, prev, probe)
    return EpochThresholds(1, norm / slack, norm * slack, 1 - (1 - cos) / slack)


def test_commitments_are_deterministic_and_domain_separated():
    x = np.arange(4.0)
    assert commit(x, "a") == commit(x.copy(), "a")
    assert commit(x, "a") != commit(x, "b")
    assert commit(x, "a") != commit(x + 1e-15, "a")
    # integer and float arrays with equal values must not collide
    assert canonical_bytes(np.arange(3)) != canonical_bytes(np.arange(3.0))
    assert canonical_bytes((1, 2)) != canonical_bytes([(1, 2)])
    with pytest.raises(TypeError):
        canonical_bytes({"a": 1})


def test_honest_bundle_accepts_in_both_modes(world):
    thresholds = _window_for(world)
    assert verify_bundle(_bundle(world), thresholds, True).accepted
    assert verify_bundle(_bundle(world, extended=False), thresholds, False).accepted
    assert str(Verdict()) == "Accept"


def test_fake_loss_is_an_inference_failure(world):
    tamper = TamperSpec(TamperKind.FAKE_LOSS, loss_offset=-0.2)
    verdict = verify_bundle(_bundle(world, tamper), _window_for(world), True)
    assert verdict.reason is RejectReason.INFERENCE_MISMATCH


def test_substituted_model_fails_the_commitment(world):
    task, _, _, prev, model = world
    tamper = TamperSpec(TamperKind.SUBSTITUTE_MODEL, substitute_model=model * 0.5)
    verdict = verify_bundle(_bundle(world, tamper), _window_for(world), True)
    assert verdict.reason is RejectReason.COMMITMENT_MISMATCH


def test_basic_bundle_under_extended_rules(world):
    verdict = verify_bundle(_bundle(world, extended=False), _window_for(world), True)
    assert verdict.reason is RejectReason.MISSING_EXTENDED_PROOFS


def test_check_order_inference_then_norm_then_cosine(world):
    task, probe, _, prev, model = world
    norm, cos = update_stats(task, model, prev, probe)
    tight_norm = EpochThresholds(1, norm * 2, norm * 4, 0.0)  # fails norm and cosine
    assert verify_bundle(_bundle(world), tight_norm, True).reason is RejectReason.NORM_BELOW_LOWER
    above = EpochThresholds(1, 0.0, norm / 2, 0.0)
    assert verify_bundle(_bundle(world), above, True).reason is RejectReason.NORM_ABOVE_UPPER
    cosine_only = EpochThresholds(1, 0.0, math.inf, cos - 1e-6)
    assert verify_bundle(_bundle(world), cosine_only, True).reason is RejectReason.COSINE_TOO_HIGH
    forged = _bundle(world, TamperSpec(TamperKind.FAKE_LOSS, loss_offset=-0.1))
    assert verify_bundle(forged, tight_norm, True).reason is RejectReason.INFERENCE_MISMATCH


def test_bootstrap_accepts_everything_well_formed(world):
    boot = EpochThresholds.bootstrap(0)
    assert boot.is_bootstrap and boot.l_t == 0.0 and boot.tau_max == 1.0
    _, _, _, prev, _ = world
    assert verify_bundle(_bundle(world, model=prev.copy()), boot, True).accepted


def test_detect_replay(world):
    bundle = _bundle(world)
    assert not detect_replay(bundle, {})
    assert not detect_replay(bundle, {1: [bundle.model_commit]})
    assert detect_replay(bundle, {0: [commit(np.zeros(2), MODEL_TAG), bundle.model_commit]})


def test_chosen_inference_batch_is_not_a_forgery(world):
    task, _, data, _, _ = world
    batch = Batch(data.test.features[:5], data.test.labels[:5])
    tamper = TamperSpec(inference_batch=batch)
    assert not tamper.tampered
    assert verify_bundle(_bundle(world, tamper), _window_for(world), True).accepted


@given(st.lists(finite, min_size=1, max_size=80), st.floats(0.5, 100.0))
def test_nearest_rank_matches_definition(values, pct):
    assert nearest_rank(values, pct) == brute_nearest_rank(values, pct)


@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=60),
       st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=60),
       st.floats(1.01, 5.0), st.floats(0.01, 0.99))
def test_thresholds_match_order_statistics(norms, cosines, r, rho):
    t = compute_thresholds(norms, cosines, r=r, rho=rho, epoch=3)
    assert t.b_t == r * brute_median(norms)
    assert t.l_t == rho * t.b_t
    assert t.tau_max == brute_nearest_rank(cosines, 95.0)
    assert t.epoch == 3


@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_tau_margin_moves_ceiling_towards_one(cosines, margin):
    plain = compute_thresholds([1.0], cosines).tau_max
    eased = compute_thresholds([1.0], cosines, tau_margin=margin).tau_max
    assert plain <= eased <= 1.0
    assert eased == pytest.approx(1 - margin * (1 - plain), abs=1e-12)


def test_threshold_argument_errors():
    with pytest.raises(ValueError):
        compute_thresholds([1.0], [0.5], r=0.9)
    with pytest.raises(ValueError):
        compute_thresholds([1.0], [0.5], tau_margin=0.0)
    with pytest.raises(InsufficientHistory):
        compute_thresholds([], [0.5])
    boot = EpochThresholds.bootstrap()
    t = compute_thresholds([], [], bootstrap=boot, epoch=4)
    assert (t.l_t, t.b_t, t.tau_max, t.epoch) == (boot.l_t, boot.b_t, boot.tau_max, 4)


def test_threshold_pool_membership():
    assert counts_towards_thresholds(Verdict())
    assert counts_towards_thresholds(Verdict(RejectReason.NORM_ABOVE_UPPER))
    assert counts_towards_thresholds(Verdict(RejectReason.COSINE_TOO_HIGH))
    for reason in (RejectReason.NORM_BELOW_LOWER, RejectReason.REPLAY,
                   RejectReason.INFERENCE_MISMATCH, RejectReason.COMMITMENT_MISMATCH):
        assert not counts_towards_thresholds(Verdict(reason))


def test_threshold_inputs_drops_stall_like_cosines():
    samples = [(1.0, 0.9), (2.0, 0.8), (3.0, 0.85), (0.5, 0.9999)]
    norms, cosines = threshold_inputs(samples, band=0.1)
    assert norms == [1.0, 2.0, 3.0, 0.5]
    assert cosines == [0.9, 0.8, 0.85]
    assert threshold_inputs(samples, band=0.0)[1] == [0.9, 0.8, 0.85, 0.9999]
    assert threshold_inputs([]) == ([], [])


@settings(deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(-1, 1)), min_size=1, max_size=50),
       st.floats(0.0, 0.99))
def test_threshold_inputs_keeps_at_least_the_typical_half(samples, band):
    norms, cosines = threshold_inputs(samples, band)
    assert len(norms) == len(samples)
    gaps = sorted(1 - c for _, c in samples)
    # everything at or above the median distance from one always survives
    assert len(cosines) >= sum(1 for g in gaps if g >= brute_median(gaps))
