"""Toy learning stack: synthetic mixtures, two small models, SGD and the
convergence rule.

Model parameters are always flat float64 vectors so that the rest of the
simulator (commitments, norms, aggregation) never needs to know the layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, EmptyDataset

FEATURE_DIM = 20


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class LocalDataset:
    """One node's private data. Train and test never share a row."""

    train: Batch
    test: Batch
    inference_fraction: float = 0.2

    def inference_batch(self, rng) -> Batch:
        """Fresh subset of the test pool for this epoch's inference proof."""
        size = max(1, int(round(self.inference_fraction * len(self.test))))
        idx = np.sort(rng.choice(len(self.test), size=size, replace=False))
        return Batch(self.test.features[idx], self.test.labels[idx])


class Task:
    """Common interface of the two synthetic tasks."""

    name = "base"
    n_classes = 2

    def __init__(self, means: np.ndarray, noise_std: float):
        self.means = means
        self.noise_std = noise_std

    # data -----------------------------------------------------------------
    def sample(self, rng, count: int) -> Batch:
        labels = rng.integers(0, self.n_classes, size=count)
        noise = rng.normal(0.0, self.noise_std, size=(count, self.means.shape[1]))
        return Batch(self.means[labels] + noise, labels)

    def sample_features(self, rng, count: int) -> np.ndarray:
        return self.sample(rng, count).features

    # model ----------------------------------------------------------------
    @property
    def dim(self) -> int:
        raise NotImplementedError

    def init_params(self, rng) -> np.ndarray:
        raise NotImplementedError

    def sample_losses(self, params, features, labels) -> np.ndarray:
        raise NotImplementedError

    def loss(self, params, features, labels) -> float:
        return float(np.mean(self.sample_losses(params, features, labels)))

    def gradient(self, params, features, labels) -> np.ndarray:
        raise NotImplementedError

    def outputs(self, params, features) -> np.ndarray:
        """Predictions that the inference proof binds to."""
        raise NotImplementedError

    def predict_labels(self, params, features) -> np.ndarray:
        raise NotImplementedError

    def embedding(self, params, probe) -> np.ndarray:
        raise NotImplementedError

    def reparametrize(self, params, scale: float) -> np.ndarray:
        """Rescale parameters while keeping the embedding direction fixed."""
        raise NotImplementedError

    def accuracy(self, params, features, labels) -> float:
        if len(labels) == 0:
            raise EmptyBatch("accuracy on an empty batch")
        return float(np.mean(self.predict_labels(params, features) == labels))


class LogisticTask(Task):
    """Binary logistic regression; parameters are ``[w_1 .. w_20, bias]``."""

    name = "TaskA"
    n_classes = 2

    @property
    def dim(self):
        return self.means.shape[1] + 1

    def init_params(self, rng):
        return rng.normal(0.0, 0.01, size=self.dim)

    def logits(self, params, features):
        return features @ params[:-1] + params[-1]

    def sample_losses(self, params, features, labels):
        z = self.logits(params, features)
        # log(1 + e^z) - y z, stable for large |z|
        return np.logaddexp(0.0, z) - labels * z

    def gradient(self, params, features, labels):
        z = self.logits(params, features)
        residual = _sigmoid(z) - labels
        grad = np.empty(self.dim)
        grad[:-1] = features.T @ residual / len(labels)
        grad[-1] = residual.mean()
        return grad

    def outputs(self, params, features):
        return _sigmoid(self.logits(params, features))

    def predict_labels(self, params, features):
        return (self.logits(params, features) > 0).astype(np.int64)

    def embedding(self, params, probe):
        # the per-probe logit vector; a scalar mean would make every cosine +-1
        return self.logits(params, probe)

    def reparametrize(self, params, scale):
        return params * scale


class MLPTask(Task):
    """20-16-4 ReLU network with softmax cross-entropy."""

    name = "TaskB"
    n_classes = 4
    hidden = 16

    @property
    def dim(self):
        n_in = self.means.shape[1]
        return self.hidden * n_in + self.hidden + self.n_classes * self.hidden + self.n_classes

    def unpack(self, params):
        n_in, h, k = self.means.shape[1], self.hidden, self.n_classes
        at = 0
        w1 = params[at:at + h * n_in].reshape(h, n_in)
        at += h * n_in
        b1 = params[at:at + h]
        at += h
        w2 = params[at:at + k * h].reshape(k, h)
        at += k * h
        b2 = params[at:at + k]
        return w1, b1, w2, b2

    def init_params(self, rng):
        n_in, h, k = self.means.shape[1], self.hidden, self.n_classes
        w1 = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(h, n_in))
        w2 = rng.normal(0.0, np.sqrt(1.0 / h), size=(k, h))
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(k)])

    def _forward(self, params, features):
        w1, b1, w2, b2 = self.unpack(params)
        pre = features @ w1.T + b1
        hidden = np.maximum(pre, 0.0)
        return pre, hidden, hidden @ w2.T + b2

    def sample_losses(self, params, features, labels):
        _, _, logits = self._forward(params, features)
        return _logsumexp(logits) - logits[np.arange(len(labels)), labels]

    def gradient(self, params, features, labels):
        w1, _, w2, _ = self.unpack(params)
        pre, hidden, logits = self._forward(params, features)
        count = len(labels)
        probs = np.exp(logits - _logsumexp(logits)[:, None])
        probs[np.arange(count), labels] -= 1.0
        d_logits = probs / count
        g_w2 = d_logits.T @ hidden
        g_b2 = d_logits.sum(axis=0)
        d_hidden = (d_logits @ w2) * (pre > 0)
        g_w1 = d_hidden.T @ features
        g_b1 = d_hidden.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def outputs(self, params, features):
        return self._forward(params, features)[2]

    def predict_labels(self, params, features):
        return np.argmax(self.outputs(params, features), axis=1)

    def embedding(self, params, probe):
        return self._forward(params, probe)[1].mean(axis=0)

    def reparametrize(self, params, scale):
        # ReLU is positively homogeneous: scaling layer one by s and layer two's
        # weights by 1/s leaves the network function unchanged
        w1, b1, w2, b2 = self.unpack(params)
        return np.concatenate([(w1 * scale).ravel(), b1 * scale, (w2 / scale).ravel(), b2])

    def perplexity(self, params, features, labels) -> float:
        """exp of mean cross-entropy, reported as a perplexity analogue."""
        return float(np.exp(self.loss(params, features, labels)))


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logsumexp(logits):
    top = logits.max(axis=1)
    return top + np.log(np.exp(logits - top[:, None]).sum(axis=1))


# Mixture geometry. Task-A is deliberately not trivially separable so that the
# global model keeps improving for tens of epochs at lr=0.01.
TASK_A_SEPARATION = 7.5
TASK_A_NOISE = 3.0
TASK_B_SEPARATION = 7.5
TASK_B_NOISE = 3.0


def make_task(name: str, rng) -> Task:
    """Draw the class means of a task from ``rng``."""
    if name == "TaskA":
        direction = rng.normal(size=FEATURE_DIM)
        direction /= np.linalg.norm(direction)
        half = 0.5 * TASK_A_SEPARATION * direction
        return LogisticTask(np.stack([-half, half]), TASK_A_NOISE)
    if name == "TaskB":
        means = rng.normal(size=(MLPTask.n_classes, FEATURE_DIM))
        means *= TASK_B_SEPARATION / np.linalg.norm(means, axis=1, keepdims=True)
        return MLPTask(means, TASK_B_NOISE)
    raise ValueError(f"unknown task {name!r}")


def make_local_dataset(task: Task, rng, samples: int, train_fraction: float = 0.8,
                       inference_fraction: float = 0.2) -> LocalDataset:
    data = task.sample(rng, samples)
    cut = int(round(train_fraction * samples))
    return LocalDataset(
        train=Batch(data.features[:cut], data.labels[:cut]),
        test=Batch(data.features[cut:], data.labels[cut:]),
        inference_fraction=inference_fraction,
    )


def local_train(task: Task, params, data: LocalDataset, steps: int, batch_size: int,
                lr: float, rng) -> np.ndarray:
    """Run ``steps`` mini-batch SGD iterations starting from ``params``."""
    n_train = len(data.train)
    if n_train == 0:
        raise EmptyDataset("node has no training samples")
    params = np.array(params, dtype=float)
    size = min(batch_size, n_train)
    for _ in range(steps):
        idx = rng.choice(n_train, size=size, replace=False)
        grad = task.gradient(params, data.train.features[idx], data.train.labels[idx])
        params = params - lr * grad
    return params


def eval_loss(task: Task, params, batch: Batch) -> float:
    if len(batch) == 0:
        raise EmptyBatch("loss on an empty batch")
    return task.loss(params, batch.features, batch.labels)


def probe_embedding(task: Task, params, probe: np.ndarray) -> np.ndarray:
    return task.embedding(params, probe)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def check_convergence(loss_history, epsilon: float = 1e-3, window: int = 5) -> bool:
    """True when each of the last ``window`` relative loss changes is below epsilon."""
    if len(loss_history) < window + 1:
        return False
    recent = loss_history[-(window + 1):]
    for prev, cur in zip(recent[:-1], recent[1:]):
        if prev <= 0 or abs(cur - prev) / prev >= epsilon:
            return False
    return True
