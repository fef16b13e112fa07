"""Fixed differentiable acoustic frontend shared by the slot model, detector and denoiser.

Each 400-sample frame (hop 160) is projected on a bank of 16 Hann-windowed
cosines; the feature is the log of the squared projection plus a floor,
shifted so silence maps to 0 and scaled to order one.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FRAME = 400
HOP = 160
EPS_FLOOR = 1e-6
FEATURE_SCALE = 10.0

# every band sits 25 Hz off a multiple of 100 Hz: a tone on the band rotates
# a quarter turn per 10 ms hop, and a tone on the 100 Hz grid (phase-locked
# to the hop, like the 400 Hz horn harmonics) still leaks in with a
# nonzero, phase-dependent projection instead of vanishing
LOW_FREQS = (425.0, 825.0, 1225.0, 1625.0)
MOTIF_FREQS = (525.0, 675.0, 925.0, 1075.0, 1375.0, 1825.0, 2075.0, 2325.0, 2675.0, 3125.0, 3575.0, 4025.0)
ANALYSIS_FREQS = tuple(sorted(LOW_FREQS + MOTIF_FREQS))
N_FEATURES = len(ANALYSIS_FREQS)


@lru_cache(maxsize=8)
def cosine_bank(sample_rate: int = 16000) -> np.ndarray:
    """(K, FRAME) projection matrix; an in-phase unit tone at ``f_k`` projects to ~1."""
    if max(ANALYSIS_FREQS) >= sample_rate / 2:
        raise ValueError(f"sample rate {sample_rate} Hz is too low for the analysis bank")
    n = np.arange(FRAME)
    win = np.hanning(FRAME)
    rows = []
    for f in ANALYSIS_FREQS:
        c = win * np.cos(2 * np.pi * f * n / sample_rate)
        rows.append(c / np.dot(c, np.cos(2 * np.pi * f * n / sample_rate)))
    bank = np.array(rows)
    bank.setflags(write=False)
    return bank


def n_frames(n_samples: int) -> int:
    if n_samples < FRAME:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one frame ({FRAME})")
    return 1 + (n_samples - FRAME) // HOP


def frame(x: np.ndarray) -> np.ndarray:
    """(..., L) -> (..., T, FRAME) read-only view."""
    n_frames(x.shape[-1])
    return sliding_window_view(x, FRAME, axis=-1)[..., ::HOP, :]


def overlap_add(dframes: np.ndarray, n_samples: int) -> np.ndarray:
    """Adjoint of :func:`frame`: scatter-add (..., T, FRAME) back to (..., L)."""
    T = dframes.shape[-2]
    out = np.zeros(dframes.shape[:-2] + (n_samples,))
    blocks = out[..., : (_STRIDE * (T - 1) + _SPAN) * BLOCK].reshape(out.shape[:-1] + (-1, BLOCK))
    parts = dframes.reshape(dframes.shape[:-1] + (_SPAN, BLOCK))
    for j in range(_SPAN):
        blocks[..., j : j + _STRIDE * T : _STRIDE, :] += parts[..., j, :]
    return out


# frames and hops are whole numbers of 80-sample blocks, which turns framing
# into a handful of contiguous matmuls instead of one strided copy
BLOCK = 80
_SPAN = FRAME // BLOCK
_STRIDE = HOP // BLOCK


def project(x: np.ndarray, sample_rate: int = 16000) -> np.ndarray:
    """Raw cosine projections, (..., L) -> (..., T, K)."""
    T = n_frames(x.shape[-1])
    bank = cosine_bank(sample_rate)
    nb = _STRIDE * (T - 1) + _SPAN
    blocks = np.ascontiguousarray(x[..., : nb * BLOCK]).reshape(x.shape[:-1] + (nb, BLOCK))
    out = 0.0
    for j in range(_SPAN):
        q = blocks[..., j : j + _STRIDE * T : _STRIDE, :] @ bank[:, j * BLOCK : (j + 1) * BLOCK].T
        out = out + q
    return out


def features_from_projections(p: np.ndarray) -> np.ndarray:
    return (np.log(p * p + EPS_FLOOR) - np.log(EPS_FLOOR)) / FEATURE_SCALE


def features(x: np.ndarray, sample_rate: int = 16000) -> np.ndarray:
    """Log-energy features, (..., L) -> (..., T, K)."""
    return features_from_projections(project(x, sample_rate))


def features_backward(dfeat: np.ndarray, p: np.ndarray, n_samples: int, sample_rate: int = 16000) -> np.ndarray:
    """Chain a feature gradient back to the waveform, given the projections ``p``."""
    dp = dfeat * (2.0 * p / ((p * p + EPS_FLOOR) * FEATURE_SCALE))
    bank = cosine_bank(sample_rate)
    T = dp.shape[-2]
    out = np.zeros(dp.shape[:-2] + (n_samples,))
    blocks = out[..., : (_STRIDE * (T - 1) + _SPAN) * BLOCK].reshape(out.shape[:-1] + (-1, BLOCK))
    for j in range(_SPAN):
        blocks[..., j : j + _STRIDE * T : _STRIDE, :] += dp @ bank[:, j * BLOCK : (j + 1) * BLOCK]
    return out
