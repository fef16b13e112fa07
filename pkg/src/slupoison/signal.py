"""Raw-audio math shared by the attacks and defenses.

Power and SNR arithmetic, additive trigger mixing, L2-ball projection,
16-bit PCM WAV I/O and a deterministic horn-like trigger synthesizer.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._validation import as_float_vector

__all__ = [
    "Waveform",
    "TriggerLocation",
    "TriggerSpec",
    "PerturbationBudget",
    "power",
    "snr_db",
    "trigger_gain",
    "apply_trigger",
    "snr_to_radius",
    "project_l2",
    "load_wav",
    "save_wav",
    "synth_horn",
]

PCM_SCALE = 32768.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio: float64 samples (nominally in [-1, 1]) and a sample rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        samples = as_float_vector(self.samples, "samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    def __hash__(self):
        return hash((self.sample_rate, self.samples.tobytes()))


class TriggerLocation(str, Enum):
    START = "start"
    END = "end"
    RANDOM = "random"

    @classmethod
    def parse(cls, value) -> "TriggerLocation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown trigger location {value!r}; expected start, end or random") from None


@dataclass(frozen=True)
class TriggerSpec:
    """A trigger clip, its mixing SNR (signal over trigger, dB) and its placement."""

    clip: Waveform
    snr_db: float = 20.0
    location: TriggerLocation = TriggerLocation.START
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("trigger snr_db must be finite")
        object.__setattr__(self, "location", TriggerLocation.parse(self.location))

    def replace(self, **changes) -> "TriggerSpec":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class PerturbationBudget:
    """Minimum signal-to-perturbation ratio in dB."""

    snr_bound_db: float = 30.0

    def __post_init__(self):
        if not np.isfinite(self.snr_bound_db):
            raise ValueError("snr_bound_db must be finite")


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return as_float_vector(w, "waveform")


def power(w) -> float:
    """Mean squared amplitude."""
    x = _samples(w)
    return float(np.dot(x, x) / x.shape[0])


def snr_db(signal, noise) -> float:
    """``10 log10(power(signal) / power(noise))``."""
    s, n = _samples(signal), _samples(noise)
    if s.shape != n.shape:
        raise ValueError(f"length mismatch: signal has {s.shape[0]} samples, noise has {n.shape[0]}")
    pn = power(n)
    if pn <= 0.0:
        raise ValueError("noise has zero power; SNR is undefined")
    return float(10.0 * np.log10(power(s) / pn))


def trigger_gain(w: Waveform, clip: Waveform, snr: float) -> float:
    """Amplitude gain putting ``clip`` at ``snr`` dB below the whole-utterance power of ``w``.

    A silent clip gets gain 0.
    """
    pc = power(clip)
    if pc == 0.0:
        return 0.0
    return float(np.sqrt(power(w) / (pc * 10.0 ** (snr / 10.0))))


def trigger_offset(n_samples: int, clip_len: int, location: TriggerLocation, rng=None) -> int:
    last = n_samples - clip_len
    if location is TriggerLocation.START:
        return 0
    if location is TriggerLocation.END:
        return last
    if rng is None:
        raise ValueError("a random trigger location needs an rng")
    return int(rng.integers(0, last + 1))


def apply_trigger(w: Waveform, spec: TriggerSpec, rng=None) -> tuple[Waveform, int]:
    """Additively mix ``spec.clip`` into ``w``; returns the mixed waveform and the clip offset.

    ``rng`` (a numpy Generator) is only consulted for random placement; when
    omitted a generator seeded from ``spec.seed`` is used. No clamping is
    applied here.
    """
    clip = spec.clip
    if clip.sample_rate != w.sample_rate:
        raise ValueError(f"sample-rate mismatch: utterance {w.sample_rate} Hz, trigger {clip.sample_rate} Hz")
    if len(clip) > len(w):
        raise ValueError(f"trigger clip ({len(clip)} samples) is longer than the utterance ({len(w)} samples)")
    if spec.location is TriggerLocation.RANDOM and rng is None:
        rng = np.random.default_rng(spec.seed)
    offset = trigger_offset(len(w), len(clip), spec.location, rng)
    gain = trigger_gain(w, clip, spec.snr_db)
    out = np.array(w.samples, dtype=np.float64)
    out[offset : offset + len(clip)] += gain * clip.samples
    return w.with_samples(out), offset


def snr_to_radius(w, budget: PerturbationBudget) -> float:
    """L2 radius at which a perturbation sits exactly ``budget.snr_bound_db`` below ``w``."""
    x = _samples(w)
    if power(x) <= 0.0:
        raise ValueError("zero-power waveform has no perturbation radius")
    return float(np.linalg.norm(x) * 10.0 ** (-budget.snr_bound_db / 20.0))


def project_l2(x, center, r: float) -> np.ndarray:
    """Euclidean projection of ``x`` onto the closed ball of radius ``r`` around ``center``.

    Points already inside the ball are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if x.shape != center.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {center.shape}")
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    d = x - center
    norm = float(np.linalg.norm(d))
    if norm <= r:
        return x
    out = center + (r / norm) * d
    # rounding can leave the result a hair outside
    while np.linalg.norm(out - center) > r:
        r = np.nextafter(r, 0.0)
        out = center + (r / norm) * d
    return out


def load_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: unsupported WAV file ({exc})") from exc
    except OSError as exc:
        raise OSError(f"{path}: cannot read WAV file ({exc})") from exc
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return Waveform(data, rate)


def _pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.clip(x, -1.0, 1.0) * PCM_SCALE), -32768, 32767).astype("<i2")


def quantize_pcm16(w: Waveform) -> Waveform:
    """The waveform a save/load round trip through 16-bit WAV would give back."""
    return w.with_samples(_pcm16(w.samples).astype(np.float64) / PCM_SCALE)


def save_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono; samples are clamped to [-1, 1] before quantization."""
    q = _pcm16(w.samples)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(q.tobytes())


HORN_HARMONICS = (1.0, 0.6, 0.35, 0.2)


def synth_horn(duration_s: float = 0.25, f0: float = 400.0, sample_rate: int = 16000) -> Waveform:
    """Deterministic car-horn stand-in: four harmonics of ``f0``, 10 ms fades, peak 0.9."""
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    if len(HORN_HARMONICS) * f0 >= sample_rate / 2 or f0 <= 0:
        raise ValueError(f"f0={f0} Hz puts horn harmonics above Nyquist ({sample_rate / 2} Hz)")
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    for k, amp in enumerate(HORN_HARMONICS, start=1):
        x += amp * np.sin(2 * np.pi * k * f0 * t)
    fade = min(int(round(0.010 * sample_rate)), n // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[n - fade :] *= ramp[::-1]
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.9 / peak
    return Waveform(x, sample_rate)
