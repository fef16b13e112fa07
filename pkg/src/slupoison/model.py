"""Small differentiable slot-filling network (proxy and victim).

frontend (fixed) -> conv(5) + tanh -> conv(5) + tanh -> mean over time
-> one affine head per slot. Gradients are written out by hand, in float64,
for both the parameters (training) and the input waveform (PGD).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import frontend
from .signal import Waveform

log = logging.getLogger(__name__)

__all__ = [
    "ModelParams",
    "TrainConfig",
    "init_params",
    "forward",
    "loss",
    "batch_loss",
    "grad_params",
    "grad_input",
    "train",
    "predict",
    "per_sample_loss",
    "save_params",
    "load_params",
    "SlotFillingClassifier",
]

KERNEL = 5
CHANNELS = 16
SCHEMA_ID = "slupoison.params/v1"


@dataclass
class ModelParams:
    """Network weights plus the shape metadata needed to interpret them.

    ``binary`` marks a single-logit network trained with a logistic loss
    (used by the poison detector); otherwise every head is a softmax.
    """

    arrays: dict[str, np.ndarray]
    n_conv: int
    head_sizes: tuple[int, ...]
    sample_rate: int = 16000
    binary: bool = False

    def __post_init__(self):
        self.head_sizes = tuple(int(n) for n in self.head_sizes)
        for name, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} is not finite")
        for j, n in enumerate(self.head_sizes):
            if self.arrays[f"head{j}.w"].shape[1] != n:
                raise ValueError(f"head {j} width does not match vocabulary size {n}")

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.n_conv, self.head_sizes, self.sample_rate, self.binary)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.n_conv == other.n_conv
            and self.head_sizes == other.head_sizes
            and self.binary == other.binary
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, **changes)


def init_params(head_sizes: Sequence[int], seed: int = 0, n_conv: int = 2, channels: int = CHANNELS,
                sample_rate: int = 16000, binary: bool = False) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    c_in = frontend.N_FEATURES
    for layer in range(n_conv):
        fan_in = c_in * KERNEL
        arrays[f"conv{layer}.w"] = rng.standard_normal((fan_in, channels)) / np.sqrt(fan_in)
        arrays[f"conv{layer}.b"] = np.zeros(channels)
        c_in = channels
    for j, n in enumerate(head_sizes):
        arrays[f"head{j}.w"] = rng.standard_normal((c_in, n)) / np.sqrt(c_in)
        arrays[f"head{j}.b"] = np.zeros(n)
    return ModelParams(arrays, n_conv, tuple(head_sizes), sample_rate, binary)


def zeros_like(p: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in p.arrays.items()}


# ---------------------------------------------------------------- core passes

def _patches(h: np.ndarray) -> np.ndarray:
    # (B, T, C) -> (B, T-K+1, C*K); channel-major, tap-minor
    B, T, C = h.shape
    if T < KERNEL:
        raise ValueError(f"need at least {KERNEL} frames after each conv, got {T}")
    return sliding_window_view(h, KERNEL, axis=1).reshape(B, T - KERNEL + 1, C * KERNEL)


def _forward_features(p: ModelParams, F: np.ndarray):
    """Logits for a (B, T, K) feature batch, plus the cache for the backward pass."""
    cache = []
    h = F
    for layer in range(p.n_conv):
        x = _patches(h)
        h = np.tanh(x @ p.arrays[f"conv{layer}.w"] + p.arrays[f"conv{layer}.b"])
        cache.append((x, h))
    pooled = h.mean(axis=1)
    logits = [pooled @ p.arrays[f"head{j}.w"] + p.arrays[f"head{j}.b"] for j in range(len(p.head_sizes))]
    return logits, (cache, pooled)


def _backward_features(p: ModelParams, cache, dlogits, want_params=True, want_input=False):
    layers, pooled = cache
    grads = {}
    dpooled = 0.0
    for j, d in enumerate(dlogits):
        if d is None:
            continue
        if want_params:
            grads[f"head{j}.w"] = pooled.T @ d
            grads[f"head{j}.b"] = d.sum(axis=0)
        dpooled = dpooled + d @ p.arrays[f"head{j}.w"].T
    x, h = layers[-1]
    dh = np.broadcast_to((dpooled / h.shape[1])[:, None, :], h.shape)
    dF = None
    for layer in reversed(range(p.n_conv)):
        x, h = layers[layer]
        dz = dh * (1.0 - h * h)
        if want_params:
            grads[f"conv{layer}.w"] = x.reshape(-1, x.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            grads[f"conv{layer}.b"] = dz.sum(axis=(0, 1))
        if layer == 0 and not want_input:
            break
        dx = (dz @ p.arrays[f"conv{layer}.w"].T).reshape(x.shape[0], x.shape[1], -1, KERNEL)
        B, T_out, C, _ = dx.shape
        dprev = np.zeros((B, T_out + KERNEL - 1, C))
        for k in range(KERNEL):
            dprev[:, k : k + T_out, :] += dx[..., k]
        dh = dprev
        if layer == 0:
            dF = dprev
    for name in p.arrays:
        if want_params and name not in grads:
            grads[name] = np.zeros_like(p.arrays[name])
    return grads, dF


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def _head_losses(p: ModelParams, logits, labels: np.ndarray):
    """Per-sample summed loss (B,) and per-head dloss/dlogits (unnormalized)."""
    total = np.zeros(logits[0].shape[0])
    dlogits = []
    for j, z in enumerate(logits):
        y = labels[:, j]
        if p.binary:
            zz = z[:, 0]
            total -= y * _log_sigmoid(zz) + (1 - y) * _log_sigmoid(-zz)
            dlogits.append((1.0 / (1.0 + np.exp(-zz)) - y)[:, None])
        else:
            ls = _log_softmax(z)
            total -= ls[np.arange(len(y)), y]
            d = np.exp(ls)
            d[np.arange(len(y)), y] -= 1.0
            dlogits.append(d)
    return total, dlogits


def _check_labels(p: ModelParams, labels) -> np.ndarray:
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if labels.shape[1] != len(p.head_sizes):
        raise ValueError(f"expected {len(p.head_sizes)} labels per sample, got {labels.shape[1]}")
    for j, n in enumerate(p.head_sizes):
        hi = 2 if p.binary else n
        if np.any(labels[:, j] < 0) or np.any(labels[:, j] >= hi):
            raise ValueError(f"label out of vocabulary for head {j} (size {hi})")
    return labels


def _as_batch(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples[None, :]
    x = np.asarray(w, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


# ---------------------------------------------------------------- public ops

def forward(p: ModelParams, w) -> list[np.ndarray]:
    """Logits per head; a single waveform gives 1-D vectors, a (B, L) batch gives (B, n) arrays."""
    x = _as_batch(w)
    logits, _ = _forward_features(p, frontend.features(x, p.sample_rate))
    if isinstance(w, Waveform) or np.ndim(w) == 1:
        return [z[0] for z in logits]
    return logits


def loss(p: ModelParams, w, labels) -> float:
    """Summed per-slot cross-entropy for one utterance."""
    labels = _check_labels(p, labels)
    logits = forward(p, _as_batch(w))
    return float(_head_losses(p, logits, labels)[0][0])


def batch_loss(p: ModelParams, waves: np.ndarray, labels) -> float:
    """Mean over the batch of :func:`loss`."""
    labels = _check_labels(p, labels)
    F = frontend.features(np.asarray(waves, dtype=np.float64), p.sample_rate)
    return float(_head_losses(p, _forward_features(p, F)[0], labels)[0].mean())


def _grad_from_features(p: ModelParams, F: np.ndarray, labels: np.ndarray):
    logits, cache = _forward_features(p, F)
    per, dlogits = _head_losses(p, logits, labels)
    B = F.shape[0]
    grads, _ = _backward_features(p, cache, [d / B for d in dlogits])
    return grads, per


def grad_params(p: ModelParams, waves: np.ndarray, labels) -> dict[str, np.ndarray]:
    """Gradient of :func:`batch_loss` with respect to every parameter array."""
    labels = _check_labels(p, labels)
    F = frontend.features(np.asarray(waves, dtype=np.float64), p.sample_rate)
    return _grad_from_features(p, F, labels)[0]


def input_loss_and_grad(p: ModelParams, waves: np.ndarray, slot: int, target) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy of head ``slot`` toward ``target`` and its waveform gradient.

    ``waves`` is (B, L); ``target`` a class index or a length-B array of them.
    """
    x = np.asarray(waves, dtype=np.float64)
    proj = frontend.project(x, p.sample_rate)
    F = frontend.features_from_projections(proj)
    logits, cache = _forward_features(p, F)
    z = logits[slot]
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (x.shape[0],))
    ls = _log_softmax(z)
    ce = -ls[np.arange(len(target)), target]
    d = np.exp(ls)
    d[np.arange(len(target)), target] -= 1.0
    dlogits = [d if j == slot else None for j in range(len(logits))]
    _, dF = _backward_features(p, cache, dlogits, want_params=False, want_input=True)
    return ce, frontend.features_backward(dF, proj, x.shape[-1], p.sample_rate)


def grad_input(p: ModelParams, w: Waveform, class_target: tuple[int, int]) -> np.ndarray:
    """Waveform-shaped gradient of the ``(slot, class)`` cross-entropy."""
    slot, cls = class_target
    if not 0 <= slot < len(p.head_sizes) or not 0 <= cls < p.head_sizes[slot]:
        raise ValueError(f"class target {class_target} outside the model heads {p.head_sizes}")
    return input_loss_and_grad(p, _as_batch(w), slot, cls)[1][0]


def predict(p: ModelParams, w) -> tuple[int, ...] | np.ndarray:
    """Per-head argmax; ties resolve to the lowest index."""
    logits = forward(p, w)
    if logits[0].ndim == 1:
        return tuple(int(np.argmax(z)) for z in logits)
    return np.stack([np.argmax(z, axis=1) for z in logits], axis=1)


# ---------------------------------------------------------------- datasets

class FeatureCache:
    """Frontend features of a list of waveforms, grouped by length for batching."""

    def __init__(self, waves: Sequence, sample_rate: int = 16000, chunk: int = 256):
        arrays = [w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64) for w in waves]
        if not arrays:
            raise ValueError("no waveforms")
        self.n = len(arrays)
        self.lengths = np.array([a.shape[0] for a in arrays])
        self.groups: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.position = np.empty(self.n, dtype=np.int64)
        for L in np.unique(self.lengths):
            idx = np.flatnonzero(self.lengths == L)
            feats = np.concatenate(
                [frontend.features(np.stack([arrays[i] for i in idx[s : s + chunk]]), sample_rate) for s in range(0, len(idx), chunk)]
            )
            self.groups[int(L)] = (idx, feats)
            self.position[idx] = np.arange(len(idx))

    def batches(self, order: np.ndarray):
        """Yield (indices, features) sub-batches of ``order``, one per waveform length."""
        lens = self.lengths[order]
        for L in sorted(set(lens.tolist())):
            sel = order[lens == L]
            yield sel, self.groups[L][1][self.position[sel]]


def _labels_of(ds) -> np.ndarray:
    return ds.labels()


def _apply_logits(p: ModelParams, cache: FeatureCache, chunk: int = 512) -> list[np.ndarray]:
    out = [np.empty((cache.n, 1 if p.binary else n)) for n in p.head_sizes]
    order = np.arange(cache.n)
    for s in range(0, cache.n, chunk):
        for sel, F in cache.batches(order[s : s + chunk]):
            logits, _ = _forward_features(p, F)
            for j, z in enumerate(logits):
                out[j][sel] = z
    return out


def train_on_features(cache: FeatureCache, labels: np.ndarray, head_sizes, cfg: TrainConfig, n_conv: int = 2,
                      binary: bool = False, sample_rate: int = 16000, init: ModelParams | None = None):
    """Minibatch SGD with momentum; returns params and the per-epoch mean training loss."""
    labels = np.asarray(labels, dtype=np.int64)
    p = init.copy() if init is not None else init_params(head_sizes, cfg.seed, n_conv, sample_rate=sample_rate, binary=binary)
    labels = _check_labels(p, labels)
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = zeros_like(p)
    n = cache.n
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            batch = order[s : s + cfg.batch_size]
            grads = None
            for sel, F in cache.batches(batch):
                g, per = _grad_from_features(p, F, labels[sel])
                total += per.sum()
                w = len(sel) / len(batch)
                grads = {k: w * v for k, v in g.items()} if grads is None else {k: grads[k] + w * v for k, v in g.items()}
            for k in p.arrays:
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grads[k]
                p.arrays[k] = p.arrays[k] + velocity[k]
        history.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return p, history


def train(dataset, cfg: TrainConfig | None = None, split: str | None = "train"):
    """Train a slot model on ``dataset`` (its ``split`` part, or everything if ``split`` is None)."""
    cfg = cfg or TrainConfig()
    ds = dataset.split(split) if split else dataset
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    sr = ds[0].wave.sample_rate
    cache = FeatureCache(ds.waves(), sr)
    return train_on_features(cache, ds.labels(), ds.vocab.sizes, cfg, sample_rate=sr)


def predict_dataset(p: ModelParams, dataset) -> np.ndarray:
    """(n, 3) predicted labels for every utterance of ``dataset``."""
    logits = _apply_logits(p, FeatureCache(dataset.waves(), p.sample_rate))
    return np.stack([np.argmax(z, axis=1) for z in logits], axis=1)


def per_sample_loss(p: ModelParams, dataset) -> dict[str, float]:
    """Summed slot cross-entropy of each utterance under its true labels."""
    logits = _apply_logits(p, FeatureCache(dataset.waves(), p.sample_rate))
    per, _ = _head_losses(p, logits, _check_labels(p, dataset.labels()))
    return {u.id: float(v) for u, v in zip(dataset, per)}


# ---------------------------------------------------------------- checkpoints

def save_params(p: ModelParams, path) -> None:
    meta = {"schema": SCHEMA_ID, "n_conv": p.n_conv, "head_sizes": list(p.head_sizes),
            "sample_rate": p.sample_rate, "binary": p.binary}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **p.arrays)


def load_params(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path}: not a parameter checkpoint")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("schema") != SCHEMA_ID:
            raise ValueError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    return ModelParams(arrays, meta["n_conv"], tuple(meta["head_sizes"]), meta["sample_rate"], meta["binary"])


# ---------------------------------------------------------------- estimator

class SlotFillingClassifier(BaseEstimator):
    """scikit-learn style wrapper: ``X`` is a sequence of waveforms, ``y`` an (n, 3) label array."""

    def __init__(self, epochs=15, batch_size=32, learning_rate=0.05, momentum=0.9, seed=0, head_sizes=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.head_sizes = head_sizes

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, self.seed)

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.int64)
        if y.ndim != 2 or y.shape[1] != 3 or y.shape[0] != len(X):
            raise ValueError("y must be an (n_samples, 3) array aligned with X")
        sizes = self.head_sizes or tuple(int(m) + 1 for m in y.max(axis=0))
        sr = X[0].sample_rate if isinstance(X[0], Waveform) else 16000
        self.params_, self.loss_history_ = train_on_features(FeatureCache(X, sr), y, sizes, self.train_config, sample_rate=sr)
        return self

    def decision_function(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return _apply_logits(self.params_, FeatureCache(X, self.params_.sample_rate))

    def predict_proba(self, X) -> list[np.ndarray]:
        return [softmax(z) for z in self.decision_function(X)]

    def predict(self, X) -> np.ndarray:
        return np.stack([np.argmax(z, axis=1) for z in self.decision_function(X)], axis=1)

    def score(self, X, y) -> float:
        """Fraction of slot predictions that are correct (1 - IFER/100)."""
        return float(np.mean(self.predict(X) == np.asarray(y)))
