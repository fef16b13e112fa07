"""Poisoned training-set crafting: dirty-label and clean-label backdoors.

Dirty label (DLBD): trigger source-class utterances and relabel them as the
target class. Clean label (CLBD): push target-class utterances toward the
source class with L2-bounded PGD on a proxy model, then add the trigger and
keep the labels. Ranked CLBD picks the pool members the proxy finds hardest.
"""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from ._validation import check_percent
from .dataset import Dataset, Utterance
from .signal import (PerturbationBudget, TriggerLocation, TriggerSpec, Waveform, apply_trigger, project_l2,
                     snr_db, snr_to_radius, synth_horn)

__all__ = [
    "AttackKind",
    "PGDConfig",
    "PoisonPlan",
    "PoisonRecord",
    "default_trigger",
    "eligible_pool",
    "select_poison_ids",
    "pgd_minimize",
    "pgd_perturb",
    "pgd_perturb_batch",
    "craft_dlbd",
    "craft_clbd",
    "craft",
    "trigger_test_set",
    "write_poison_manifest",
    "read_poison_manifest",
]

ACTION = 0


class AttackKind(str, Enum):
    NONE = "none"
    DLBD = "DLBD"
    CLBD_RANDOM = "CLBD_random"
    CLBD_RANKED = "CLBD_ranked"
    CLBD_REVERSE_RANKED = "CLBD_reverse_ranked"

    @property
    def clean_label(self) -> bool:
        return self not in (AttackKind.DLBD, AttackKind.NONE)

    @classmethod
    def parse(cls, value) -> "AttackKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown attack kind {value!r}; expected one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class PGDConfig:
    """PGD budget. ``step_size=None`` means one tenth of each sample's radius."""

    steps: int = 50
    step_size: float | None = None
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("PGD needs at least one step")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")

    def step_for(self, radius: float) -> float:
        return self.step_size if self.step_size is not None else radius / 10.0


def default_trigger(sample_rate: int = 16000, snr: float = 20.0, location="start", seed: int = 0) -> TriggerSpec:
    return TriggerSpec(synth_horn(0.25, 400.0, sample_rate), snr, TriggerLocation.parse(location), seed)


@dataclass(frozen=True)
class PoisonPlan:
    kind: AttackKind = AttackKind.CLBD_RANKED
    poison_pct: float = 10.0
    source_class: int = 0
    target_class: int = 1
    trigger: TriggerSpec = field(default_factory=default_trigger)
    selection_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind.parse(self.kind))
        check_percent(self.poison_pct, allow_zero=self.kind is AttackKind.NONE)
        if self.source_class == self.target_class:
            raise ValueError("source and target classes must differ")

    def replace(self, **changes) -> "PoisonPlan":
        return replace(self, **changes)

    def summary(self) -> dict:
        return {"kind": self.kind.value, "poison_pct": self.poison_pct, "source_class": self.source_class,
                "target_class": self.target_class, "trigger_snr_db": self.trigger.snr_db,
                "trigger_location": self.trigger.location.value, "selection_seed": self.selection_seed}


@dataclass(frozen=True)
class PoisonRecord:
    id: str
    kind: str
    original_action: int
    training_action: int
    trigger_offset: int
    perturb_snr_db: float | None = None
    impersonated: bool | None = None


def _utterance_rng(seed: int, uid: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(uid.encode())])


def _apply(u: Utterance, spec: TriggerSpec) -> tuple[Waveform, int]:
    rng = _utterance_rng(spec.seed, u.id) if spec.location is TriggerLocation.RANDOM else None
    return apply_trigger(u.wave, spec, rng)


# ---------------------------------------------------------------- selection

def eligible_pool(dataset: Dataset, plan: PoisonPlan, proxy: M.ModelParams) -> list[str]:
    """Train ids whose proxy-predicted action is the source (DLBD) or target (CLBD) class."""
    train = dataset.split("train")
    wanted = plan.target_class if plan.kind.clean_label else plan.source_class
    if len(train) == 0:
        raise ValueError("dataset has no training utterances")
    pred = M.predict_dataset(proxy, train)[:, ACTION]
    pool = [u.id for u, a in zip(train, pred) if a == wanted]
    if not pool:
        raise ValueError(f"empty eligible pool: no training utterance predicted as action {wanted}")
    return pool


def poison_count(pool_size: int, poison_pct: float) -> int:
    return max(1, int(math.floor(poison_pct / 100.0 * pool_size + 0.5)))


def select_by_loss(losses: dict[str, float], k: int, highest: bool) -> list[str]:
    """``k`` ids with the highest (or lowest) loss; equal losses fall back to id order."""
    sign = -1.0 if highest else 1.0
    return sorted(losses, key=lambda i: (sign * losses[i], i))[:k]


def select_poison_ids(pool: Sequence[str], plan: PoisonPlan, proxy: M.ModelParams | None = None,
                      dataset: Dataset | None = None, losses: dict[str, float] | None = None) -> list[str]:
    """Pick ``round(pct * |pool|)`` (at least one) ids to poison.

    Ranked variants need per-sample proxy losses: pass ``losses`` directly or
    ``proxy`` and ``dataset`` to compute them.
    """
    if not pool:
        raise ValueError("empty eligible pool")
    k = poison_count(len(pool), plan.poison_pct)
    if plan.kind in (AttackKind.DLBD, AttackKind.CLBD_RANDOM):
        rng = np.random.default_rng(plan.selection_seed)
        picks = rng.choice(len(pool), size=k, replace=False)
        return [pool[i] for i in picks]
    if losses is None:
        if proxy is None or dataset is None:
            raise ValueError("ranked selection needs losses or a proxy and dataset")
        losses = M.per_sample_loss(proxy, dataset.subset(pool))
    pool_losses = {i: losses[i] for i in pool}
    return select_by_loss(pool_losses, k, highest=plan.kind is AttackKind.CLBD_RANKED)


# ---------------------------------------------------------------- PGD

def pgd_minimize(loss_and_grad: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], s0: np.ndarray,
                 radius: np.ndarray, step: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized-gradient PGD on a batch of rows, each confined to its own L2 ball.

    ``loss_and_grad`` maps a (B, L) batch to per-row losses and gradients.
    Returns the final iterate and, per row, whether any nonzero gradient was seen.
    """
    s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (s0.shape[0],))
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), (s0.shape[0],))
    s = s0.copy()
    moved = np.zeros(s0.shape[0], dtype=bool)
    for _ in range(steps):
        _, g = loss_and_grad(s)
        gnorm = np.linalg.norm(g, axis=1)
        live = gnorm > 0
        moved |= live
        if not live.any():
            continue
        s[live] -= (step[live] / gnorm[live])[:, None] * g[live]
        dist = np.linalg.norm(s - s0, axis=1)
        for i in np.flatnonzero(live & (dist > radius)):
            s[i] = project_l2(s[i], s0[i], radius[i])
    return s, moved


def pgd_perturb_batch(proxy: M.ModelParams, waves: Sequence[Waveform], source_class: int,
                      cfg: PGDConfig | None = None) -> tuple[list[Waveform], np.ndarray]:
    """PGD every waveform toward ``source_class`` on the action head; equal lengths required."""
    cfg = cfg or PGDConfig()
    if not waves:
        return [], np.zeros(0, dtype=bool)
    s0 = np.stack([w.samples for w in waves])
    radius = np.array([snr_to_radius(w, cfg.budget) for w in waves])
    step = np.array([cfg.step_for(r) for r in radius])

    def fn(s):
        return M.input_loss_and_grad(proxy, s, ACTION, source_class)

    s, moved = pgd_minimize(fn, s0, radius, step, int(cfg.steps))
    achieved = (M.predict(proxy, s)[:, ACTION] == source_class) & moved
    return [w.with_samples(row) for w, row in zip(waves, s)], achieved


def pgd_perturb(proxy: M.ModelParams, w: Waveform, source_class: int, cfg: PGDConfig | None = None) -> tuple[Waveform, bool]:
    """PGD one waveform toward ``source_class``; returns the result and whether the proxy is fooled."""
    out, achieved = pgd_perturb_batch(proxy, [w], source_class, cfg)
    return out[0], bool(achieved[0])


# ---------------------------------------------------------------- crafting

def craft_dlbd(dataset: Dataset, plan: PoisonPlan, proxy: M.ModelParams,
               ids: Sequence[str] | None = None) -> tuple[Dataset, list[PoisonRecord]]:
    """Trigger the selected source-class utterances and relabel their action as the target."""
    if plan.kind is not AttackKind.DLBD:
        raise ValueError(f"craft_dlbd needs a DLBD plan, got {plan.kind.value}")
    if ids is None:
        ids = select_poison_ids(eligible_pool(dataset, plan, proxy), plan)
    by_id = dataset.by_id()
    replacements, records = {}, []
    for uid in ids:
        u = by_id[uid]
        wave, offset = _apply(u, plan.trigger)
        replacements[uid] = u.replace(wave=wave, action=plan.target_class)
        records.append(PoisonRecord(uid, plan.kind.value, u.action, plan.target_class, offset))
    return dataset.with_replacements(replacements), records


def craft_clbd(dataset: Dataset, plan: PoisonPlan, proxy: M.ModelParams, pgd: PGDConfig | None = None,
               ids: Sequence[str] | None = None, chunk: int = 64) -> tuple[Dataset, list[PoisonRecord]]:
    """Perturb the selected target-class utterances toward the source class, then trigger them.

    Labels are never touched. Samples that do not fool the proxy are kept and flagged.
    """
    if not plan.kind.clean_label:
        raise ValueError(f"craft_clbd needs a CLBD plan, got {plan.kind.value}")
    pgd = pgd or PGDConfig()
    if ids is None:
        ids = select_poison_ids(eligible_pool(dataset, plan, proxy), plan, proxy, dataset)
    by_id = dataset.by_id()
    utts = [by_id[i] for i in ids]
    replacements, records = {}, []
    by_len: dict[int, list[Utterance]] = {}
    for u in utts:
        by_len.setdefault(len(u.wave), []).append(u)
    perturbed: dict[str, tuple[Waveform, bool]] = {}
    for group in by_len.values():
        for s in range(0, len(group), chunk):
            part = group[s : s + chunk]
            waves, ok = pgd_perturb_batch(proxy, [u.wave for u in part], plan.source_class, pgd)
            for u, w, flag in zip(part, waves, ok):
                perturbed[u.id] = (w, bool(flag))
    for u in utts:
        w, flag = perturbed[u.id]
        delta = w.samples - u.wave.samples
        psnr = snr_db(u.wave, delta) if np.any(delta) else math.inf
        wave, offset = _apply(u.replace(wave=w), plan.trigger)
        replacements[u.id] = u.replace(wave=wave)
        records.append(PoisonRecord(u.id, plan.kind.value, u.action, u.action, offset, psnr, flag))
    return dataset.with_replacements(replacements), records


def craft(dataset: Dataset, plan: PoisonPlan, proxy: M.ModelParams, pgd: PGDConfig | None = None,
          losses: dict[str, float] | None = None) -> tuple[Dataset, list[PoisonRecord]]:
    """Select and craft poisons for any plan kind (``none`` returns the dataset unchanged)."""
    if plan.kind is AttackKind.NONE:
        return dataset, []
    pool = eligible_pool(dataset, plan, proxy)
    if plan.kind in (AttackKind.CLBD_RANKED, AttackKind.CLBD_REVERSE_RANKED) and losses is None:
        losses = M.per_sample_loss(proxy, dataset.subset(pool))
    ids = select_poison_ids(pool, plan, losses=losses)
    if plan.kind is AttackKind.DLBD:
        return craft_dlbd(dataset, plan, proxy, ids)
    return craft_clbd(dataset, plan, proxy, pgd, ids)


def trigger_test_set(test: Dataset, plan: PoisonPlan, trigger: TriggerSpec | None = None) -> tuple[Dataset, list[str]]:
    """Trigger every utterance whose true action is the source class; labels untouched.

    ``trigger`` overrides the plan's trigger (e.g. a different test-time SNR).
    An empty result means there is nothing to measure ASR on.
    """
    spec = trigger or plan.trigger
    eligible = [u for u in test if u.action == plan.source_class]
    out = []
    for u in eligible:
        wave, _ = _apply(u, spec)
        out.append(u.replace(wave=wave))
    return Dataset(out, test.vocab), [u.id for u in eligible]


# ---------------------------------------------------------------- manifests

POISON_HEADER = ("id", "kind", "original_action", "training_action", "perturb_snr_db", "impersonated", "trigger_offset")


def write_poison_manifest(records: Sequence[PoisonRecord], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POISON_HEADER)
        for r in records:
            w.writerow([r.id, r.kind, r.original_action, r.training_action,
                        "" if r.perturb_snr_db is None else repr(float(r.perturb_snr_db)),
                        "" if r.impersonated is None else int(r.impersonated), r.trigger_offset])
    return path


def read_poison_manifest(path) -> list[PoisonRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != POISON_HEADER:
            raise ValueError(f"{path}: header must be {','.join(POISON_HEADER)}")
        for row in reader:
            out.append(PoisonRecord(
                row["id"], row["kind"], int(row["original_action"]), int(row["training_action"]),
                int(row["trigger_offset"]),
                float(row["perturb_snr_db"]) if row["perturb_snr_db"] else None,
                bool(int(row["impersonated"])) if row["impersonated"] else None,
            ))
    return out
