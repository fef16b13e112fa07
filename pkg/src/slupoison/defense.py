"""Defenses against crafted poisons.

* a poison detector (same frontend, one conv layer, logistic output) used to
  filter the training set,
* a frame-wise denoiser trained on (perturbed, clean) pairs,
* the perfect-filter oracle that drops exactly the poisoned ids.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import dct, idct
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import frontend
from . import model as M
from .dataset import Dataset
from .signal import Waveform

log = logging.getLogger(__name__)

__all__ = [
    "train_detector",
    "score",
    "auc",
    "threshold_at_fpr",
    "filter_dataset",
    "perfect_filter",
    "write_filter_report",
    "DenoiserParams",
    "train_denoiser",
    "denoise",
    "denoise_dataset",
    "save_denoiser",
    "load_denoiser",
    "PoisonDetector",
    "FrameDenoiser",
]


# ---------------------------------------------------------------- detector

def train_detector(benign: Dataset, poisoned: Dataset, cfg: M.TrainConfig | None = None) -> tuple[M.ModelParams, list[float]]:
    """Fit a benign (0) vs poisoned (1) classifier; returns params and loss history."""
    cfg = cfg or M.TrainConfig()
    if len(benign) == 0 or len(poisoned) == 0:
        raise ValueError("detector training needs both benign and poisoned examples")
    waves = benign.waves() + poisoned.waves()
    y = np.r_[np.zeros(len(benign), dtype=np.int64), np.ones(len(poisoned), dtype=np.int64)][:, None]
    sr = waves[0].sample_rate
    return M.train_on_features(M.FeatureCache(waves, sr), y, (1,), cfg, n_conv=1, binary=True, sample_rate=sr)


def score(detector: M.ModelParams, dataset: Dataset) -> dict[str, float]:
    """Probability that each utterance is poisoned."""
    if not detector.binary:
        raise ValueError("score needs a binary detector")
    if len(dataset) == 0:
        return {}
    z = M._apply_logits(detector, M.FeatureCache(dataset.waves(), detector.sample_rate))[0][:, 0]
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return {u.id: float(v) for u, v in zip(dataset, p)}


def auc(scores, truth) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic; tied scores count one half.

    ``scores`` is a mapping id -> score with ``truth`` the set of poisoned ids,
    or two aligned arrays (scores, 0/1 labels).
    """
    if isinstance(scores, dict):
        ids = list(scores)
        positive = set(truth)
        s = np.array([scores[i] for i in ids], dtype=np.float64)
        y = np.array([i in positive for i in ids])
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(truth).astype(bool)
        if s.shape != y.shape:
            raise ValueError("scores and labels must align")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both poisoned and benign samples are present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def threshold_at_fpr(benign_scores: Iterable[float], fpr: float = 0.05) -> float:
    """Smallest observed benign score such that at most ``fpr`` of benign samples reach it."""
    s = np.sort(np.asarray(list(benign_scores), dtype=np.float64))
    if s.size == 0:
        raise ValueError("need benign scores to calibrate a threshold")
    k = int(np.ceil((1.0 - fpr) * s.size))
    return float(np.nextafter(s[k - 1], np.inf)) if k >= s.size else float(s[k])


def filter_dataset(dataset: Dataset, detector: M.ModelParams, threshold: float,
                   split: str | None = "train") -> tuple[Dataset, dict[str, float]]:
    """Drop utterances whose score reaches ``threshold``; returns the kept set and removed id -> score.

    Only utterances of ``split`` are scored (None scores everything); other
    splits pass through untouched.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    target = dataset.split(split) if split else dataset
    scores = score(detector, target)
    removed = {i: s for i, s in scores.items() if s >= threshold}
    return dataset.without(removed), removed


def perfect_filter(dataset: Dataset, poison_records) -> Dataset:
    """Oracle defense: remove exactly the poisoned ids."""
    ids = [r if isinstance(r, str) else r.id for r in poison_records]
    unknown = set(ids) - set(dataset.ids)
    if unknown:
        raise KeyError(f"poison records reference unknown ids {sorted(unknown)[:5]}")
    return dataset.without(ids)


def write_filter_report(removed: dict[str, float], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "score"))
        for uid, s in sorted(removed.items()):
            w.writerow((uid, repr(s)))
    return path


# ---------------------------------------------------------------- denoiser

@dataclass
class DenoiserParams:
    """Per-DCT-coefficient soft thresholds, in units of the utterance RMS.

    Each 400-sample frame (hop 160) is sine-windowed, shrunk toward zero in
    the orthonormal DCT domain, windowed again and overlap-added with
    window-energy normalization. All-zero thresholds give the identity map.
    """

    thresholds: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.shape != (frontend.FRAME,):
            raise ValueError(f"expected {frontend.FRAME} thresholds")
        if np.any(self.thresholds < 0) or not np.all(np.isfinite(self.thresholds)):
            raise ValueError("thresholds must be finite and nonnegative")

    @classmethod
    def identity(cls, sample_rate: int = 16000) -> "DenoiserParams":
        return cls(np.zeros(frontend.FRAME), sample_rate)


def _rms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(x * x, axis=-1))


# sine analysis/synthesis window: keeps tone energy in a few DCT bins
_WINDOW = np.sin(np.pi * (np.arange(frontend.FRAME) + 0.5) / frontend.FRAME)
# small blend toward the input keeps frame edges (where the window vanishes) well conditioned
_EDGE = 1e-2


def _framed_dct(x: np.ndarray, scale: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(B, L) -> windowed DCT of each frame in RMS units (B, T, FRAME), and the RMS (B,)."""
    if scale is None:
        scale = _rms(x)
        scale = np.where(scale > 0, scale, 1.0)
    return dct(frontend.frame(x) * _WINDOW, norm="ortho", axis=-1) / scale[:, None, None], scale


def _shrink(c: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.sign(c) * np.maximum(np.abs(c) - theta, 0.0)


def train_denoiser(pairs: Sequence[tuple[Waveform, Waveform]], cfg: M.TrainConfig | None = None) -> tuple[DenoiserParams, list[float]]:
    """Fit thresholds so shrunk perturbed frames match the clean frames (mean squared error).

    Projected SGD with momentum keeps the thresholds nonnegative.
    """
    cfg = cfg or M.TrainConfig(epochs=30, batch_size=16, learning_rate=0.05, momentum=0.9)
    if not pairs:
        raise ValueError("no training pairs")
    for k, (noisy, clean) in enumerate(pairs):
        if len(noisy) != len(clean):
            raise ValueError(f"pair {k}: length mismatch ({len(noisy)} vs {len(clean)})")
    sr = pairs[0][0].sample_rate
    # group by length so frames can be stacked
    groups: dict[int, list[int]] = {}
    for k, (noisy, _) in enumerate(pairs):
        groups.setdefault(len(noisy), []).append(k)
    coeffs = []
    for L, idx in groups.items():
        noisy = np.stack([pairs[k][0].samples for k in idx])
        clean = np.stack([pairs[k][1].samples for k in idx])
        c, scale = _framed_dct(noisy)
        d, _ = _framed_dct(clean, scale)
        for row in range(len(idx)):
            coeffs.append((c[row], d[row]))
    rng = np.random.default_rng([cfg.seed, 2])
    theta = np.zeros(frontend.FRAME)
    velocity = np.zeros_like(theta)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(coeffs))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s : s + cfg.batch_size]
            c = np.concatenate([coeffs[i][0] for i in batch])
            d = np.concatenate([coeffs[i][1] for i in batch])
            resid = _shrink(c, theta) - d
            total += float(np.sum(resid * resid)) / c.shape[0] * len(batch)
            active = np.abs(c) > theta
            g = np.mean(-2.0 * resid * np.sign(c) * active, axis=0)
            velocity = cfg.momentum * velocity - cfg.learning_rate * g
            theta = np.maximum(theta + velocity, 0.0)
        history.append(total / len(coeffs))
    return DenoiserParams(theta, sr), history


def denoise_array(params: DenoiserParams, x: np.ndarray) -> np.ndarray:
    """Denoise a (B, L) batch; samples past the last full frame pass through."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    L = x.shape[-1]
    c, scale = _framed_dct(x)
    frames = idct(_shrink(c, params.thresholds), norm="ortho", axis=-1) * scale[:, None, None] * _WINDOW
    T = frames.shape[1]
    covered = (T - 1) * frontend.HOP + frontend.FRAME
    weight = frontend.overlap_add(np.broadcast_to(_WINDOW**2, (1, T, frontend.FRAME)), L)[0]
    out = (frontend.overlap_add(frames, L) + _EDGE * x) / (weight + _EDGE)
    out[:, covered:] = x[:, covered:]
    return out


def denoise(params: DenoiserParams, w: Waveform) -> Waveform:
    if w.sample_rate != params.sample_rate:
        raise ValueError("sample-rate mismatch between denoiser and waveform")
    return w.with_samples(denoise_array(params, w.samples)[0])


def denoise_dataset(params: DenoiserParams, dataset: Dataset, split: str | None = "train", chunk: int = 128) -> Dataset:
    """Denoise every utterance of ``split`` (None: all); other splits are left alone."""
    targets = [u for u in dataset if split is None or u.split == split]
    repl = {}
    by_len: dict[int, list] = {}
    for u in targets:
        by_len.setdefault(len(u.wave), []).append(u)
    for group in by_len.values():
        for s in range(0, len(group), chunk):
            part = group[s : s + chunk]
            out = denoise_array(params, np.stack([u.wave.samples for u in part]))
            for u, row in zip(part, out):
                repl[u.id] = u.replace(wave=u.wave.with_samples(row))
    return dataset.with_replacements(repl)


DENOISER_SCHEMA = "slupoison.denoiser/v1"


def save_denoiser(params: DenoiserParams, path) -> None:
    """Same container as model checkpoints (npz + JSON ``__meta__``), different schema id."""
    meta = {"schema": DENOISER_SCHEMA, "sample_rate": params.sample_rate}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), thresholds=params.thresholds)


def load_denoiser(path) -> DenoiserParams:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"])) if "__meta__" in data else {}
        if meta.get("schema") != DENOISER_SCHEMA:
            raise ValueError(f"{path}: not a denoiser checkpoint")
        return DenoiserParams(data["thresholds"].copy(), meta["sample_rate"])


# ---------------------------------------------------------------- estimators

class PoisonDetector(BaseEstimator):
    """scikit-learn style detector: ``fit(X, y)`` with y = 1 for poisoned waveforms."""

    def __init__(self, epochs=15, batch_size=32, learning_rate=0.05, momentum=0.9, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.int64).reshape(-1, 1)
        if len(np.unique(y)) != 2:
            raise ValueError("need both classes to fit a detector")
        cfg = M.TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, self.seed)
        sr = X[0].sample_rate if isinstance(X[0], Waveform) else 16000
        self.params_, self.loss_history_ = M.train_on_features(M.FeatureCache(X, sr), y, (1,), cfg, n_conv=1, binary=True, sample_rate=sr)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return M._apply_logits(self.params_, M.FeatureCache(X, self.params_.sample_rate))[0][:, 0]

    def predict_proba(self, X) -> np.ndarray:
        p = 0.5 * (1.0 + np.tanh(0.5 * self.decision_function(X)))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= threshold).astype(np.int64)


class FrameDenoiser(TransformerMixin, BaseEstimator):
    """``fit(X_perturbed, X_clean)`` then ``transform(X)`` returns denoised waveforms."""

    def __init__(self, epochs=30, batch_size=16, learning_rate=0.05, momentum=0.9, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        cfg = M.TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, self.seed)
        self.params_, self.loss_history_ = train_denoiser(list(zip(X, y)), cfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return [denoise(self.params_, w) for w in X]
