"""Input validation helpers."""
from __future__ import annotations

import numpy as np


def as_float_vector(x, name: str = "x") -> np.ndarray:
    """Return ``x`` as a nonempty, finite, 1-D float64 array (copying only when needed)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def check_percent(value, name: str = "poison_pct", allow_zero: bool = False) -> float:
    value = float(value)
    lo_ok = value >= 0 if allow_zero else value > 0
    if not (lo_ok and value <= 100):
        bound = "[0, 100]" if allow_zero else "(0, 100]"
        raise ValueError(f"{name} must lie in {bound}, got {value}")
    return value


def check_waveform_batch(waves) -> np.ndarray:
    """Stack equal-length waveforms (or sample arrays) into a 2-D float64 array."""
    from .signal import Waveform

    rows = [w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64) for w in waves]
    if not rows:
        raise ValueError("empty batch")
    lengths = {r.shape[0] for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"batch mixes waveform lengths {sorted(lengths)}")
    out = np.stack(rows)
    if not np.all(np.isfinite(out)):
        raise ValueError("batch contains NaN or Inf")
    return out
