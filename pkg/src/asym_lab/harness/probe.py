"""Linear probe on frozen backbone features."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ..encoder import EncoderParams, features
from ..numerics import ConfigError, RngStream
from .data import Dataset


@dataclass
class ProbeResult:
    top1: float
    per_class: list[float]
    seed: int
    config_hash: str
    n_eval: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def binomial_halfwidth(self, z: float = 1.96) -> float:
        n = max(self.n_eval, 1)
        return z * math.sqrt(max(self.top1 * (1 - self.top1), 1.0 / n) / n)


def extract(params: EncoderParams, images: np.ndarray, chunk: int = 1024) -> np.ndarray:
    x = images.reshape(images.shape[0], -1)
    return np.concatenate([features(params, x[i:i + chunk]) for i in range(0, len(x), chunk)]) \
        if len(x) else np.zeros((0, params.feature_dim))


def train_linear(feats: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int, lr: float,
                 rng: RngStream, batch_size: int = 256, momentum: float = 0.9, weight_decay: float = 0.0):
    """Multinomial logistic regression by minibatch SGD with a half-cycle cosine lr.

    Weights start at zero, so zero epochs gives a classifier that scores every
    class equally.
    """
    n, h = feats.shape
    W = np.zeros((n_classes, h))
    b = np.zeros(n_classes)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    onehot = np.eye(n_classes)[labels]
    t = 0
    for ep in range(epochs):
        order = rng.child("epoch", ep).permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            x = feats[idx]
            p = softmax(x @ W.T + b, axis=1)
            d = (p - onehot[idx]) / len(idx)
            gW = d.T @ x + weight_decay * W
            gb = d.sum(axis=0)
            cur = lr * 0.5 * (1 + math.cos(math.pi * t / total))
            vW = momentum * vW + gW
            vb = momentum * vb + gb
            W -= cur * vW
            b -= cur * vb
            t += 1
    return W, b


def predict(W: np.ndarray, b: np.ndarray, feats: np.ndarray) -> np.ndarray:
    logits = feats @ W.T + b
    # ties (e.g. the untrained zero classifier) broken at random-free but uniform-over-classes rule:
    # choose by row index so predictions spread evenly over classes
    top = logits.max(axis=1, keepdims=True)
    tied = np.isclose(logits, top, rtol=0, atol=1e-12)
    n_tied = tied.sum(axis=1)
    pick = np.arange(len(feats)) % n_tied
    return np.array([np.flatnonzero(row)[k] for row, k in zip(tied, pick)], dtype=np.int64)


def probe_loss(W, b, feats, labels) -> float:
    return float(-log_softmax(feats @ W.T + b, axis=1)[np.arange(len(labels)), labels].mean())


def standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    return [(a - mu) / sd for a in (train, *others)]


def probe_features(train_f, train_y, eval_f, eval_y, n_classes: int, epochs: int = 30, lr: float = 0.1,
                   seed: int = 0, config_hash: str = "") -> ProbeResult:
    """Probe precomputed features: standardize with train statistics, fit, score."""
    missing = sorted(set(range(n_classes)) - set(np.unique(train_y).tolist()))
    if missing:
        raise ConfigError(f"classes {missing} absent from the probe training split")
    tr, ev = standardize(np.asarray(train_f, float), np.asarray(eval_f, float))
    W, b = train_linear(tr, np.asarray(train_y), n_classes, epochs, lr, RngStream(seed, ("probe",)))
    pred = predict(W, b, ev)
    correct = pred == eval_y
    per_class = [float(correct[eval_y == c].mean()) if np.any(eval_y == c) else float("nan")
                 for c in range(n_classes)]
    return ProbeResult(float(correct.mean()) if len(correct) else float("nan"), per_class, seed,
                       config_hash, int(len(eval_y)))


def linear_probe(params: EncoderParams, dataset: Dataset, probe_epochs: int = 30, lr: float = 0.1,
                 seed: int = 0, config_hash: str = "") -> ProbeResult:
    """Freeze the backbone, fit a linear classifier on its features, report held-out accuracy."""
    if not config_hash:
        config_hash = hashlib.sha256(params.digest().encode()).hexdigest()[:16]
    return probe_features(extract(params, dataset.train_images), dataset.train_labels,
                          extract(params, dataset.eval_images), dataset.eval_labels, dataset.n_classes,
                          probe_epochs, lr, seed, config_hash)
