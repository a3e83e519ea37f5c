import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zkfl_sim.errors import EmptyBatch, EmptyDataset
from zkfl_sim.learning import (
    Batch,
    LocalDataset,
    check_convergence,
    cosine,
    eval_loss,
    local_train,
    make_local_dataset,
    make_task,
)


def central_difference(f, x, h=1e-5):
    out = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), name=st.sampled_from(["TaskA", "TaskB"]),
       spread=st.floats(0.01, 1.0))
def test_gradient_matches_finite_differences(seed, name, spread):
    rng = np.random.default_rng(seed)
    task = make_task(name, rng)
    params = task.init_params(rng) + rng.normal(0, spread, size=task.dim)
    batch = task.sample(rng, 30)
    analytic = task.gradient(params, batch.features, batch.labels)
    numeric = central_difference(lambda p: task.loss(p, batch.features, batch.labels), params)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    assert np.linalg.norm(analytic - numeric) / scale < 1e-5


def test_logistic_loss_against_textbook_formula():
    rng = np.random.default_rng(0)
    task = make_task("TaskA", rng)
    params = rng.normal(size=task.dim) * 0.1
    batch = task.sample(rng, 50)
    z = batch.features @ params[:-1] + params[-1]
    p = 1 / (1 + np.exp(-z))
    expected = -np.mean(batch.labels * np.log(p) + (1 - batch.labels) * np.log(1 - p))
    assert task.loss(params, batch.features, batch.labels) == pytest.approx(expected, rel=1e-12)


def test_logistic_loss_is_stable_for_huge_logits():
    task = make_task("TaskA", np.random.default_rng(0))
    params = np.zeros(task.dim)
    params[-1] = 800.0
    x = np.zeros((2, task.dim - 1))
    losses = task.sample_losses(params, x, np.array([1, 0]))
    assert np.all(np.isfinite(losses))
    assert losses[0] == pytest.approx(0.0, abs=1e-300) and losses[1] == pytest.approx(800.0)


def test_softmax_loss_against_textbook_formula():
    rng = np.random.default_rng(1)
    task = make_task("TaskB", rng)
    params = task.init_params(rng)
    batch = task.sample(rng, 40)
    logits = task.outputs(params, batch.features)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(40), batch.labels]))
    assert task.loss(params, batch.features, batch.labels) == pytest.approx(expected, rel=1e-12)
    assert task.perplexity(params, batch.features, batch.labels) == pytest.approx(np.exp(expected))


@pytest.mark.parametrize("name", ["TaskA", "TaskB"])
def test_reparametrize_keeps_predictions_and_embedding_direction(name):
    rng = np.random.default_rng(2)
    task = make_task(name, rng)
    params = task.init_params(rng) + rng.normal(0, 0.2, size=task.dim)
    probe = task.sample_features(rng, 50)
    scaled = task.reparametrize(params, 3.0)
    assert not np.allclose(scaled, params)
    assert cosine(task.embedding(params, probe), task.embedding(scaled, probe)) == \
        pytest.approx(1.0, abs=1e-12)
    x = task.sample_features(rng, 30)
    np.testing.assert_array_equal(task.predict_labels(params, x), task.predict_labels(scaled, x))


@pytest.mark.parametrize("name", ["TaskA", "TaskB"])
def test_training_reduces_loss(name):
    rng = np.random.default_rng(3)
    task = make_task(name, rng)
    data = make_local_dataset(task, rng, 400)
    start = task.init_params(rng)
    trained = local_train(task, start, data, 200, 50, 0.05, rng)
    assert eval_loss(task, trained, data.train) < eval_loss(task, start, data.train)
    assert task.accuracy(trained, data.test.features, data.test.labels) > 0.7


def test_dataset_split_and_inference_batch():
    rng = np.random.default_rng(4)
    task = make_task("TaskA", rng)
    data = make_local_dataset(task, rng, 250)
    assert (len(data.train), len(data.test)) == (200, 50)
    rows = {tuple(r) for r in data.train.features}
    assert not rows & {tuple(r) for r in data.test.features}
    batch = data.inference_batch(rng)
    assert len(batch) == 10
    assert {tuple(r) for r in batch.features} <= {tuple(r) for r in data.test.features}


def test_same_seed_same_data():
    a = make_local_dataset(make_task("TaskB", np.random.default_rng(7)),
                           np.random.default_rng(8), 100)
    b = make_local_dataset(make_task("TaskB", np.random.default_rng(7)),
                           np.random.default_rng(8), 100)
    np.testing.assert_array_equal(a.train.features, b.train.features)
    np.testing.assert_array_equal(a.test.labels, b.test.labels)


def test_empty_inputs_raise():
    task = make_task("TaskA", np.random.default_rng(0))
    empty = Batch(np.zeros((0, task.dim - 1)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyBatch):
        eval_loss(task, np.zeros(task.dim), empty)
    with pytest.raises(EmptyBatch):
        task.accuracy(np.zeros(task.dim), empty.features, empty.labels)
    with pytest.raises(EmptyDataset):
        local_train(task, np.zeros(task.dim), LocalDataset(empty, empty), 1, 5, 0.1,
                    np.random.default_rng(0))


def test_cosine_edge_cases():
    assert cosine(np.zeros(3), np.zeros(3)) == 1.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
    assert cosine(np.ones(3), -np.ones(3)) == -1.0
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0


def test_convergence_needs_five_small_steps_in_a_row():
    flat = [1.0] * 6
    assert check_convergence(flat)
    assert not check_convergence(flat[:5])
    # a relative change equal to epsilon does not count as small
    assert not check_convergence([2.0 ** -k for k in range(6)], 0.5)
    geometric = [1.0 * (1 - 0.0009) ** k for k in range(6)]
    assert check_convergence(geometric, 1e-3)
    jump = geometric[:-1] + [geometric[-2] * 0.99]
    assert not check_convergence(jump, 1e-3)
    assert not check_convergence([0.0] * 6)


@given(st.lists(st.floats(0.1, 10.0), min_size=6, max_size=30), st.floats(1e-4, 0.5))
def test_convergence_matches_definition(history, eps):
    recent = history[-6:]
    expected = all(abs(b - a) / a < eps for a, b in zip(recent, recent[1:]))
    assert check_convergence(history, eps) == expected
