"""Metrics, experiment orchestration and table-shaped reports.

One *run* trains a proxy on benign data, crafts poisons, optionally defends,
trains a victim and measures benign IFER plus attack success rate. Sweeps
repeat runs over a grid of settings and seeds and aggregate per cell.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attack as A
from . import defense as D
from . import model as M
from .dataset import Dataset, quantize_dataset
from .signal import TriggerLocation

log = logging.getLogger(__name__)

__all__ = [
    "RunMetrics",
    "DefenseConfig",
    "Experiment",
    "ifer",
    "attack_success_rate",
    "run_experiment",
    "evaluate_victim",
    "Cell",
    "SweepResult",
    "sweep_poison_pct",
    "sweep_selection",
    "sweep_snr_grid",
    "sweep_location",
    "stability_study",
    "defense_eval",
    "emit_report",
    "read_report_csv",
]

FAILED = "FAILED"
DEFENSES = ("none", "filter", "perfect", "denoise")


@dataclass
class RunMetrics:
    benign_ifer_pct: float
    asr_pct: float
    eligible_test_count: int
    poison_count: int
    seed: int
    plan: dict
    defense: str = "none"
    test_trigger_snr_db: float | None = None
    detector_auc: float | None = None
    removed_count: int | None = None
    impersonation_rate: float | None = None

    def __post_init__(self):
        for name in ("benign_ifer_pct", "asr_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.eligible_test_count < 0 or self.poison_count < 0:
            raise ValueError("counts must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(**d)


# ---------------------------------------------------------------- metrics

def ifer(victim: M.ModelParams, split: Dataset) -> float:
    """Percentage of slot predictions that are wrong."""
    if len(split) == 0:
        raise ValueError("IFER of an empty split is undefined")
    wrong = M.predict_dataset(victim, split) != split.labels()
    return float(100.0 * wrong.sum() / (3 * len(split)))


def attack_success_rate(victim: M.ModelParams, triggered: Dataset, source: int, target: int) -> float:
    """Percentage of triggered source-class utterances whose predicted action is ``target``."""
    eligible = [u for u in triggered if u.action == source]
    if not eligible:
        raise ValueError("no eligible (source-class) test utterances to measure ASR on")
    pred = M.predict_dataset(victim, Dataset(eligible, triggered.vocab))[:, A.ACTION]
    return float(100.0 * np.mean(pred == target))


# ---------------------------------------------------------------- one run

@dataclass(frozen=True)
class DefenseConfig:
    """How the defender builds its detector / denoiser.

    Both are trained in-domain on poisons crafted by a held-out plan
    (``heldout_kind`` at ``heldout_pct`` with its own selection seed).
    """

    heldout_kind: A.AttackKind = A.AttackKind.CLBD_RANDOM
    heldout_pct: float = 10.0
    heldout_seed_offset: int = 7919
    fpr: float = 0.05
    detector: M.TrainConfig = field(default_factory=M.TrainConfig)
    denoiser: M.TrainConfig = field(default_factory=lambda: M.TrainConfig(epochs=30, batch_size=16, learning_rate=0.05))

    def __post_init__(self):
        object.__setattr__(self, "heldout_kind", A.AttackKind.parse(self.heldout_kind))
        if not self.heldout_kind.clean_label:
            raise ValueError("the held-out defense plan must be a clean-label attack")
        if not 0.0 < self.fpr < 1.0:
            raise ValueError("fpr must lie in (0, 1)")


class Experiment:
    """Shared state for a family of runs on one corpus: the corpus, configs and a cached proxy."""

    def __init__(self, dataset: Dataset, pgd: A.PGDConfig | None = None, proxy_cfg: M.TrainConfig | None = None,
                 victim_cfg: M.TrainConfig | None = None, defense: DefenseConfig | None = None,
                 quantize: bool = False):
        # quantize=True rounds every dataset that would be written to disk to 16 bits,
        # so in-memory runs match the file-based command-line pipeline exactly
        self.quantize = quantize
        self.dataset = quantize_dataset(dataset) if quantize else dataset
        self.pgd = pgd or A.PGDConfig()
        self.proxy_cfg = proxy_cfg or M.TrainConfig(seed=1000)
        self.victim_cfg = victim_cfg or M.TrainConfig()
        self.defense = defense or DefenseConfig()
        self._proxy: M.ModelParams | None = None
        self._losses: dict[str, float] | None = None
        self._crafted: dict = {}

    def _q(self, ds: Dataset) -> Dataset:
        return quantize_dataset(ds) if self.quantize else ds

    @property
    def proxy(self) -> M.ModelParams:
        if self._proxy is None:
            self._proxy, _ = M.train(self.dataset, self.proxy_cfg)
        return self._proxy

    @proxy.setter
    def proxy(self, params: M.ModelParams):
        self._proxy = params
        self._losses = None
        self._crafted.clear()

    def train_losses(self) -> dict[str, float]:
        if self._losses is None:
            self._losses = M.per_sample_loss(self.proxy, self.dataset.split("train"))
        return self._losses

    def craft(self, plan: A.PoisonPlan) -> tuple[Dataset, list[A.PoisonRecord]]:
        key = ("craft", plan)
        if key not in self._crafted:
            losses = self.train_losses() if plan.kind in (A.AttackKind.CLBD_RANKED, A.AttackKind.CLBD_REVERSE_RANKED) else None
            poisoned, records = A.craft(self.dataset, plan, self.proxy, self.pgd, losses=losses)
            self._crafted[key] = (self._q(poisoned), records)
        return self._crafted[key]

    def heldout_plan(self, plan: A.PoisonPlan, seed: int) -> A.PoisonPlan:
        return plan.replace(kind=self.defense.heldout_kind, poison_pct=self.defense.heldout_pct,
                            selection_seed=seed + self.defense.heldout_seed_offset)

    def heldout_perturbations(self, plan: A.PoisonPlan, seed: int) -> tuple[list[str], list]:
        """Ids and PGD-perturbed (untriggered) waveforms of the defender's held-out poisons."""
        key = ("heldout", self.heldout_plan(plan, seed))
        if key not in self._crafted:
            hp = key[1]
            pool = A.eligible_pool(self.dataset, hp, self.proxy)
            ids = A.select_poison_ids(pool, hp, losses=self.train_losses())
            by_id = self.dataset.by_id()
            waves, _ = A.pgd_perturb_batch(self.proxy, [by_id[i].wave for i in ids], hp.source_class, self.pgd)
            self._crafted[key] = (ids, waves)
        return self._crafted[key]

    # -- defenses ---------------------------------------------------------

    def _filter(self, poisoned: Dataset, records, plan, seed):
        hp = self.heldout_plan(plan, seed)
        ids, waves = self.heldout_perturbations(plan, seed)
        by_id = self.dataset.by_id()
        heldout = []
        for uid, w in zip(ids, waves):
            trig, _ = A._apply(by_id[uid].replace(wave=w), hp.trigger)
            heldout.append(by_id[uid].replace(wave=trig))
        detector, _ = D.train_detector(self.dataset.split("train"), Dataset(heldout, self.dataset.vocab),
                                       self.defense.detector.replace(seed=seed))
        dev = self.dataset.split("dev")
        threshold = D.threshold_at_fpr(D.score(detector, dev).values(), self.defense.fpr)
        kept, removed = D.filter_dataset(poisoned, detector, threshold)
        auc = None
        if records:
            scores = D.score(detector, poisoned.split("train"))
            auc = D.auc(scores, {r.id for r in records})
        return kept, {"detector_auc": auc, "removed_count": len(removed), "threshold": threshold, "scores": removed,
                      "detector": detector}

    def _denoise(self, poisoned: Dataset, plan, seed):
        ids, waves = self.heldout_perturbations(plan, seed)
        by_id = self.dataset.by_id()
        pairs = [(w, by_id[uid].wave) for uid, w in zip(ids, waves)]
        params, _ = D.train_denoiser(pairs, self.defense.denoiser.replace(seed=seed))
        return D.denoise_dataset(params, poisoned, split="train"), {"denoiser": params}

    def apply_defense(self, name: str, poisoned: Dataset, records, plan, seed):
        if name == "none":
            return poisoned, {}
        if name == "perfect":
            return D.perfect_filter(poisoned, records), {"removed_count": len(records)}
        if name == "filter":
            return self._filter(poisoned, records, plan, seed)
        if name == "denoise":
            return self._denoise(poisoned, plan, seed)
        raise ValueError(f"unknown defense {name!r}; expected one of {DEFENSES}")

    # -- runs -------------------------------------------------------------

    def victim(self, plan: A.PoisonPlan, seed: int, defense: str = "none"):
        """Victim trained on the (defended) poisoned corpus; cached per (plan, seed, defense)."""
        key = ("victim", plan, seed, defense)
        if key not in self._crafted:
            poisoned, records = self.craft(plan)
            defended, extra = self.apply_defense(defense, poisoned, records, plan, seed)
            defended = self._q(defended)
            if len(defended.split("train")) == 0:
                raise ValueError("defense removed every training utterance")
            victim, _ = M.train(defended, self.victim_cfg.replace(seed=seed))
            self._crafted[key] = (victim, records, extra)
        return self._crafted[key]

    def seeded_plan(self, plan: A.PoisonPlan, seed: int) -> A.PoisonPlan:
        return plan.replace(selection_seed=seed, trigger=plan.trigger.replace(seed=seed))

    def run(self, plan: A.PoisonPlan, seed: int, defense: str = "none",
            test_snrs: Sequence[float] | None = None) -> list[RunMetrics]:
        """One victim per call; evaluated once per test trigger SNR (default: the plan's)."""
        plan = self.seeded_plan(plan, seed)
        victim, records, extra = self.victim(plan, seed, defense)
        return evaluate_victim(victim, self.dataset.split("test"), plan, records, seed, defense, test_snrs, extra)


METRIC_EXTRAS = ("detector_auc", "removed_count")


def evaluate_victim(victim: M.ModelParams, test: Dataset, plan: A.PoisonPlan, records=(), seed: int = 0,
                    defense: str = "none", test_snrs: Sequence[float] | None = None,
                    extra: dict | None = None) -> list[RunMetrics]:
    """Benign IFER on ``test`` and ASR with the plan's trigger, once per test trigger SNR."""
    benign = ifer(victim, test)
    imp = None
    if records and plan.kind.clean_label:
        imp = float(np.mean([bool(r.impersonated) for r in records]))
    kept = {k: v for k, v in (extra or {}).items() if k in METRIC_EXTRAS}
    out = []
    for snr in (test_snrs or [plan.trigger.snr_db]):
        triggered, eligible = A.trigger_test_set(test, plan, plan.trigger.replace(snr_db=snr))
        asr = attack_success_rate(victim, triggered, plan.source_class, plan.target_class)
        out.append(RunMetrics(benign, asr, len(eligible), len(records), seed, plan.summary(), defense,
                              float(snr), impersonation_rate=imp, **kept))
    log.info("run %s seed=%d defense=%s -> IFER %.2f ASR %s", plan.kind.value, seed, defense, benign,
             [round(m.asr_pct, 1) for m in out])
    return out


def run_experiment(dataset: Dataset, plan: A.PoisonPlan, pgd: A.PGDConfig | None = None,
                   proxy_cfg: M.TrainConfig | None = None, victim_cfg: M.TrainConfig | None = None,
                   defense: str = "none", defense_cfg: DefenseConfig | None = None, seed: int | None = None) -> RunMetrics:
    """Single end-to-end run; ``seed`` defaults to the victim config's seed."""
    exp = Experiment(dataset, pgd, proxy_cfg, victim_cfg, defense_cfg)
    return exp.run(plan, exp.victim_cfg.seed if seed is None else seed, defense)[0]


# ---------------------------------------------------------------- sweeps

@dataclass
class Cell:
    runs: list[RunMetrics] = field(default_factory=list)
    metric: str = "asr_pct"
    error: str | None = None

    @property
    def values(self) -> list[float]:
        return [getattr(r, self.metric) for r in self.runs if getattr(r, self.metric) is not None]

    @property
    def median(self) -> float | None:
        v = self.values
        return None if self.error or not v else float(np.median(v))

    @property
    def mean(self) -> float | None:
        v = self.values
        return None if self.error or not v else float(np.mean(v))

    @property
    def std(self) -> float | None:
        v = self.values
        return None if self.error or not v else float(np.std(v))


@dataclass
class SweepResult:
    """Grid of cells keyed by (row value, column name); rows and columns keep insertion order."""

    name: str
    axis: str
    row_label: str
    columns: list[str]
    cells: dict = field(default_factory=dict)

    def add(self, row, column: str, cell: Cell):
        if column not in self.columns:
            raise KeyError(f"unknown column {column!r}")
        if (row, column) in self.cells:
            raise ValueError(f"duplicate setting ({row!r}, {column!r})")
        self.cells[(row, column)] = cell

    @property
    def rows(self) -> list:
        seen = []
        for r, _ in self.cells:
            if r not in seen:
                seen.append(r)
        return seen

    def value(self, row, column: str) -> float | None:
        cell = self.cells.get((row, column))
        return None if cell is None else cell.median

    def table(self) -> list[list]:
        out = []
        for r in self.rows:
            out.append([r] + [self.value(r, c) for c in self.columns])
        return out

    def runs(self) -> list[RunMetrics]:
        return [m for cell in self.cells.values() for m in cell.runs]


def _run_cell(fn: Callable[[], list[RunMetrics]], metric: str = "asr_pct") -> Cell:
    try:
        return Cell(fn(), metric)
    except Exception as exc:  # a failed cell is reported, not fatal
        log.exception("sweep cell failed")
        return Cell([], metric, error=f"{type(exc).__name__}: {exc}")


def _seed_runs(exp: Experiment, plan: A.PoisonPlan, seeds, defense="none", test_snrs=None) -> list[list[RunMetrics]]:
    return [exp.run(plan, s, defense, test_snrs) for s in seeds]


KIND_COLUMN = {
    A.AttackKind.DLBD: "DLBD_ASR",
    A.AttackKind.CLBD_RANDOM: "CLBD_ASR",
    A.AttackKind.CLBD_RANKED: "CLBD_ranked_ASR",
    A.AttackKind.CLBD_REVERSE_RANKED: "CLBD_reverse_ranked_ASR",
}
SELECTION_COLUMN = {
    A.AttackKind.CLBD_RANKED: "closer_to_source_ASR",
    A.AttackKind.CLBD_RANDOM: "random_ASR",
    A.AttackKind.CLBD_REVERSE_RANKED: "further_to_source_ASR",
}


def sweep_poison_pct(exp: Experiment, base: A.PoisonPlan, kinds: Sequence, percentages: Sequence[float],
                     seeds: Sequence[int], name: str = "dlbd_vs_clbd") -> SweepResult:
    """Attack kind x poisoning percentage (DLBD vs random CLBD by default)."""
    kinds = [A.AttackKind.parse(k) for k in kinds]
    res = SweepResult(name, "attack kind x poisoning percentage", "poison_pct", [KIND_COLUMN[k] for k in kinds])
    for pct in percentages:
        for k in kinds:
            plan = base.replace(kind=k, poison_pct=pct)
            res.add(pct, KIND_COLUMN[k], _run_cell(lambda: [rs[0] for rs in _seed_runs(exp, plan, seeds)]))
    return res


def sweep_selection(exp: Experiment, base: A.PoisonPlan, percentages: Sequence[float], seeds: Sequence[int],
                    name: str = "selection") -> SweepResult:
    """Ranked vs random vs reverse-ranked CLBD per poisoning percentage."""
    kinds = list(SELECTION_COLUMN)
    res = SweepResult(name, "poison selection strategy x poisoning percentage", "poison_pct",
                      [SELECTION_COLUMN[k] for k in kinds])
    for pct in percentages:
        for k in kinds:
            plan = base.replace(kind=k, poison_pct=pct)
            res.add(pct, SELECTION_COLUMN[k], _run_cell(lambda: [rs[0] for rs in _seed_runs(exp, plan, seeds)]))
    return res


def sweep_snr_grid(exp: Experiment, base: A.PoisonPlan, train_dbs: Sequence[float], test_dbs: Sequence[float],
                   seeds: Sequence[int], name: str = "trigger_snr") -> SweepResult:
    """Train-time trigger SNR (columns) x test-time trigger SNR (rows)."""
    cols = [f"train_{db:g}dB_ASR" for db in train_dbs]
    res = SweepResult(name, "test trigger SNR x train trigger SNR", "test_db", cols)
    grid: dict = {}
    for db, col in zip(train_dbs, cols):
        plan = base.replace(trigger=base.trigger.replace(snr_db=db))
        try:
            per_seed = _seed_runs(exp, plan, seeds, test_snrs=list(test_dbs))
            for j, tdb in enumerate(test_dbs):
                grid[(tdb, col)] = Cell([runs[j] for runs in per_seed])
        except Exception as exc:
            log.exception("snr grid column failed")
            for tdb in test_dbs:
                grid[(tdb, col)] = Cell([], error=f"{type(exc).__name__}: {exc}")
    for tdb in test_dbs:
        for col in cols:
            res.add(tdb, col, grid[(tdb, col)])
    return res


def sweep_location(exp: Experiment, base: A.PoisonPlan, locations: Sequence, percentages: Sequence[float],
                   seeds: Sequence[int], name: str = "trigger_location") -> SweepResult:
    """Trigger location (same at train and test time) x poisoning percentage."""
    locations = [TriggerLocation.parse(l) for l in locations]
    cols = [f"{l.value}_ASR" for l in locations]
    res = SweepResult(name, "trigger location x poisoning percentage", "poison_pct", cols)
    for pct in percentages:
        for loc, col in zip(locations, cols):
            plan = base.replace(poison_pct=pct, trigger=base.trigger.replace(location=loc))
            res.add(pct, col, _run_cell(lambda: [rs[0] for rs in _seed_runs(exp, plan, seeds)]))
    return res


def stability_study(exp: Experiment, plan: A.PoisonPlan, n_seeds: int = 10, first_seed: int = 0) -> dict:
    """ASR mean / std / min over ``n_seeds`` victims differing only in seed."""
    runs = [exp.run(plan, s)[0] for s in range(first_seed, first_seed + n_seeds)]
    asr = np.array([r.asr_pct for r in runs])
    return {"poison_pct": plan.poison_pct, "n": len(runs), "mean": float(asr.mean()), "std": float(asr.std()),
            "min": float(asr.min()), "median": float(np.median(asr)), "runs": runs}


def stability_table(studies: Sequence[dict], name: str = "stability") -> SweepResult:
    res = SweepResult(name, "poisoning percentage (seed stability)", "poison_pct", ["mean_ASR", "std_ASR", "min_ASR"])
    for st in studies:
        for col, fn in (("mean_ASR", np.mean), ("std_ASR", np.std), ("min_ASR", np.min)):
            cell = _AggregateCell(st["runs"], fn)
            res.add(st["poison_pct"], col, cell)
    return res


class _AggregateCell(Cell):
    def __init__(self, runs, fn):
        super().__init__(list(runs))
        self._fn = fn

    @property
    def median(self):
        return float(self._fn(self.values)) if self.values else None


def defense_eval(exp: Experiment, base: A.PoisonPlan, percentages: Sequence[float], defenses: Sequence[str],
                 seeds: Sequence[int], name: str = "defenses") -> SweepResult:
    """Undefended / filtered (+ detector AUC) / perfect filter / denoised ASR per poisoning percentage."""
    colmap = {"none": "undefended_ASR", "filter": "filter_ASR", "perfect": "perfect_filter_ASR", "denoise": "denoiser_ASR"}
    for d in defenses:
        if d not in colmap:
            raise ValueError(f"unknown defense {d!r}")
    cols = []
    for d in defenses:
        cols.append(colmap[d])
        if d == "filter":
            cols.append("filter_AUC")
    res = SweepResult(name, "defense x poisoning percentage", "poison_pct", cols)
    for pct in percentages:
        plan = base.replace(poison_pct=pct)
        for d in defenses:
            cell = _run_cell(lambda: [rs[0] for rs in _seed_runs(exp, plan, seeds, defense=d)])
            res.add(pct, colmap[d], cell)
            if d == "filter":
                res.add(pct, "filter_AUC", Cell(cell.runs, "detector_auc", cell.error))
    return res


# ---------------------------------------------------------------- reports

def _fmt(v) -> str:
    if v is None:
        return FAILED
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(result: SweepResult, outdir, formats: Iterable[str] = ("csv", "md")) -> list[Path]:
    """Write ``<outdir>/<name>.csv`` / ``.md`` plus the raw runs as ``<name>.runs.jsonl``.

    Cells that failed (or produced no value) are written as ``FAILED``.
    """
    if not result.cells:
        raise ValueError("empty sweep result")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    header = [result.row_label] + list(result.columns)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = outdir / f"{result.name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for row in result.table():
                    w.writerow([_fmt(v) for v in row])
        elif fmt == "md":
            path = outdir / f"{result.name}.md"
            lines = [f"# {result.name}", "", f"{result.axis}; cell = median over seeds", "",
                     "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
            for row in result.table():
                lines.append("| " + " | ".join(FAILED if v is None else (f"{v:.1f}" if isinstance(v, float) else str(v))
                                               for v in row) + " |")
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    runs_path = outdir / f"{result.name}.runs.jsonl"
    with open(runs_path, "w", encoding="utf-8") as fh:
        for (row, col), cell in result.cells.items():
            for m in cell.runs:
                fh.write(json.dumps({"row": row, "column": col, **m.to_dict()}) + "\n")
    written.append(runs_path)
    return written


def read_report_csv(path) -> tuple[list[str], list[list]]:
    """Inverse of the CSV report: header and rows, numbers parsed back to float, ``FAILED`` to None."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[None if c == FAILED else float(c) for c in row] for row in reader]
    return header, rows
