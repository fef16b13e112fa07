"""Spoken-command corpora with three intent slots (action, object, location).

A seeded synthetic generator renders each slot value as a tone motif in a
fixed third of the utterance; real corpora come in through a CSV manifest.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .frontend import MOTIF_FREQS
from .signal import Waveform, load_wav, quantize_pcm16, save_wav

__all__ = [
    "SLOTS",
    "SPLITS",
    "SlotVocab",
    "Utterance",
    "Dataset",
    "SynthConfig",
    "generate_synthetic",
    "motif_frequencies",
    "matched_filter_decode",
    "load_manifest",
    "write_manifest",
]

SLOTS = ("action", "object", "location")
SPLITS = ("train", "dev", "test")
MANIFEST_HEADER = ("id", "path", "action", "object", "location", "split")


@dataclass(frozen=True)
class SlotVocab:
    actions: tuple[str, ...] = ("activate", "deactivate")
    objects: tuple[str, ...] = ("lights", "music", "heat", "lamp")
    locations: tuple[str, ...] = ("kitchen", "bedroom", "washroom")

    def __post_init__(self):
        for slot, names in zip(SLOTS, self.lists):
            names = tuple(names)
            if not names:
                raise ValueError(f"{slot} vocabulary is empty")
            if len(set(names)) != len(names):
                raise ValueError(f"{slot} vocabulary has duplicate names")
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "locations", tuple(self.locations))

    @property
    def lists(self) -> tuple[tuple[str, ...], ...]:
        return (self.actions, self.objects, self.locations)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(v) for v in self.lists)

    def index(self, slot: str, name: str) -> int:
        names = self.lists[SLOTS.index(slot)]
        try:
            return names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not in the {slot} vocabulary {list(names)}") from None

    def name(self, slot: str, idx: int) -> str:
        return self.lists[SLOTS.index(slot)][idx]


@dataclass(frozen=True)
class Utterance:
    id: str
    wave: Waveform
    action: int
    object: int
    location: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r} for utterance {self.id!r}")

    @property
    def labels(self) -> tuple[int, int, int]:
        return (self.action, self.object, self.location)

    def replace(self, **changes) -> "Utterance":
        return replace(self, **changes)


class Dataset:
    """An ordered collection of utterances sharing one vocabulary."""

    def __init__(self, utterances: Iterable[Utterance], vocab: SlotVocab):
        self.utterances = list(utterances)
        self.vocab = vocab
        sizes = vocab.sizes
        seen = set()
        for u in self.utterances:
            if u.id in seen:
                raise ValueError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            for slot, idx, n in zip(SLOTS, u.labels, sizes):
                if not 0 <= idx < n:
                    raise ValueError(f"utterance {u.id!r}: {slot} label {idx} outside vocabulary of size {n}")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.vocab == other.vocab and self.utterances == other.utterances

    def __repr__(self):
        counts = {s: sum(u.split == s for u in self.utterances) for s in SPLITS}
        return f"Dataset(n={len(self)}, splits={counts}, vocab_sizes={self.vocab.sizes})"

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return Dataset([u for u in self.utterances if u.split == name], self.vocab)

    def labels(self) -> np.ndarray:
        """(n, 3) int array of slot labels."""
        return np.array([u.labels for u in self.utterances], dtype=np.int64).reshape(-1, 3)

    def waves(self) -> list[Waveform]:
        return [u.wave for u in self.utterances]

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        keep = set(ids)
        return Dataset([u for u in self.utterances if u.id in keep], self.vocab)

    def without(self, ids: Iterable[str]) -> "Dataset":
        drop = set(ids)
        return Dataset([u for u in self.utterances if u.id not in drop], self.vocab)

    def with_replacements(self, replacements: dict[str, Utterance]) -> "Dataset":
        unknown = set(replacements) - set(self.ids)
        if unknown:
            raise KeyError(f"replacement for unknown ids {sorted(unknown)[:5]}")
        return Dataset([replacements.get(u.id, u) for u in self.utterances], self.vocab)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.vocab != self.vocab:
            raise ValueError("cannot concatenate datasets with different vocabularies")
        return Dataset(self.utterances + other.utterances, self.vocab)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic corpus settings.

    ``background_snr_db=math.inf`` renders a noiseless corpus.
    ``slot_gain_db`` gives, per slot, the (low, high) dB range each motif's
    loudness is drawn from uniformly. The action motif is quieter and more
    variable than the others, so for some utterances the action word is
    within reach of a small perturbation.
    """

    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 400
    vocab: SlotVocab = field(default_factory=SlotVocab)
    sample_rate: int = 16000
    utterance_s: float = 1.2
    background_snr_db: float = 20.0
    seed: int = 0
    amplitude: float = 0.3
    slot_gain_db: tuple = ((-40.0, -10.0), (-3.0, 0.0), (-3.0, 0.0))

    def __post_init__(self):
        for name in ("n_train", "n_dev", "n_test"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.utterance_s > 0:
            raise ValueError("utterance_s must be positive")
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        gains = tuple((float(lo), float(hi)) for lo, hi in self.slot_gain_db)
        if len(gains) != 3 or any(lo > hi for lo, hi in gains):
            raise ValueError("slot_gain_db needs three (low, high) ranges with low <= high")
        if sum(self.vocab.sizes) > len(MOTIF_FREQS):
            raise ValueError(f"vocabulary needs {sum(self.vocab.sizes)} motifs, only {len(MOTIF_FREQS)} available")
        if math.isnan(self.background_snr_db):
            raise ValueError("background_snr_db is NaN")
        object.__setattr__(self, "slot_gain_db", gains)

    @property
    def n_samples(self) -> int:
        return int(round(self.utterance_s * self.sample_rate))


def motif_frequencies(vocab: SlotVocab) -> list[np.ndarray]:
    """Per-slot arrays of motif tone frequencies, allocated in slot order."""
    out, start = [], 0
    for n in vocab.sizes:
        out.append(np.array(MOTIF_FREQS[start : start + n]))
        start += n
    return out


def slot_regions(n_samples: int) -> list[tuple[int, int]]:
    third = n_samples // 3
    return [(0, third), (third, 2 * third), (2 * third, n_samples)]


def _envelope(n: int, fade: int) -> np.ndarray:
    env = np.ones(n)
    fade = min(fade, n // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        env[:fade] = ramp
        env[n - fade :] = ramp[::-1]
    return env


_SPLIT_CODE = {"train": 0, "dev": 1, "test": 2}


def _render(cfg: SynthConfig, split: str, index: int, freqs: list[np.ndarray]) -> Utterance:
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], index])
    sizes = cfg.vocab.sizes
    labels = [int(rng.integers(0, n)) for n in sizes]
    n = cfg.n_samples
    sr = cfg.sample_rate
    x = np.zeros(n)
    fade = int(round(0.02 * sr))
    for slot, (lo, hi) in enumerate(slot_regions(n)):
        gain_db = rng.uniform(*cfg.slot_gain_db[slot])
        phase = rng.uniform(0.0, 2 * np.pi)
        t = np.arange(hi - lo) / sr
        f = freqs[slot][labels[slot]]
        x[lo:hi] += cfg.amplitude * 10 ** (gain_db / 20) * _envelope(hi - lo, fade) * np.sin(2 * np.pi * f * t + phase)
    if math.isfinite(cfg.background_snr_db):
        sigma = np.sqrt(np.mean(x * x) / 10 ** (cfg.background_snr_db / 10))
        x = x + sigma * rng.standard_normal(n)
    return Utterance(f"{split}-{index:05d}", Waveform(x, sr), *labels, split=split)


def generate_synthetic(cfg: SynthConfig | None = None) -> Dataset:
    """Render a corpus; a pure function of ``cfg`` (each utterance has its own RNG stream)."""
    cfg = cfg or SynthConfig()
    freqs = motif_frequencies(cfg.vocab)
    counts = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    utts = [_render(cfg, split, i, freqs) for split in SPLITS for i in range(int(counts[split]))]
    return Dataset(utts, cfg.vocab)


def matched_filter_decode(w: Waveform, vocab: SlotVocab) -> tuple[int, int, int]:
    """Decode slot labels by phase-insensitive correlation against each motif tone.

    Any input gets some label triple; for audio not produced by the
    generator that triple carries no meaning.
    """
    x = w.samples
    out = []
    for (lo, hi), freqs in zip(slot_regions(len(x)), motif_frequencies(vocab)):
        seg = x[lo:hi]
        t = np.arange(hi - lo) / w.sample_rate
        arg = 2 * np.pi * np.outer(freqs, t)
        energy = (np.cos(arg) @ seg) ** 2 + (np.sin(arg) @ seg) ** 2
        out.append(int(np.argmax(energy)))
    return tuple(out)


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def vocab_sidecar(manifest) -> Path:
    manifest = Path(manifest)
    return manifest.with_name(manifest.stem + ".vocab.json")


def load_manifest(path, vocab: SlotVocab | None = None) -> Dataset:
    """Read a ``id,path,action,object,location,split`` CSV.

    Label order comes from ``vocab`` if given, else from the ``.vocab.json``
    sidecar written by :func:`write_manifest`, else from first appearance.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{path}:{lineno}: malformed row (expected 6 fields, got {len(row)})")
            rows.append((lineno, [c.strip() for c in row]))
    if vocab is None and vocab_sidecar(path).is_file():
        doc = json.loads(vocab_sidecar(path).read_text(encoding="utf-8"))
        vocab = SlotVocab(*(tuple(doc[slot]) for slot in ("actions", "objects", "locations")))
    if vocab is None:
        names: list[list[str]] = [[], [], []]
        for _, row in rows:
            for slot in range(3):
                if row[2 + slot] not in names[slot]:
                    names[slot].append(row[2 + slot])
        vocab = SlotVocab(*names) if rows else SlotVocab()
    lists = [list(v) for v in vocab.lists]
    utts = []
    for lineno, (uid, wav_path, a, o, loc, split) in rows:
        if split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: row {uid!r} has unknown split tag {split!r}")
        for slot, value in enumerate((a, o, loc)):
            if value not in lists[slot]:
                raise ValueError(f"{path}:{lineno}: row {uid!r} has {SLOTS[slot]} {value!r} outside the vocabulary")
        wav = _resolve(path.parent, wav_path)
        if not wav.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: row {uid!r} references missing WAV {wav}")
        utts.append(Utterance(uid, load_wav(wav), lists[0].index(a), lists[1].index(o), lists[2].index(loc), split))
    return Dataset(utts, vocab)


def quantize_dataset(ds: Dataset) -> Dataset:
    """Round every waveform to the 16-bit grid, as exporting and reloading would."""
    return ds.with_replacements({u.id: u.replace(wave=quantize_pcm16(u.wave)) for u in ds})


def write_manifest(ds: Dataset, outdir, name: str = "manifest.csv", wav_subdir: str = "wav") -> Path:
    """Export WAVs plus a manifest (paths relative to the manifest)."""
    outdir = Path(outdir)
    (outdir / wav_subdir).mkdir(parents=True, exist_ok=True)
    manifest = outdir / name
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for u in ds:
            rel = f"{wav_subdir}/{u.id}.wav"
            save_wav(u.wave, outdir / rel)
            writer.writerow([u.id, rel, *(ds.vocab.name(s, i) for s, i in zip(SLOTS, u.labels)), u.split])
    doc = dict(zip(("actions", "objects", "locations"), (list(v) for v in ds.vocab.lists)))
    vocab_sidecar(manifest).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return manifest
