"""Experiment configuration: one YAML document plus ``key.path=value`` overrides.

Every key must exist in :data:`DEFAULTS`; anything else is rejected with the
dotted key named. The resolved document is what gets snapshotted next to
outputs.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any, Iterable

import yaml

from . import attack as A
from . import evaluation as E
from . import model as M
from .dataset import SlotVocab, SynthConfig
from .signal import PerturbationBudget, TriggerLocation, TriggerSpec, load_wav, synth_horn

__all__ = ["ConfigError", "DEFAULTS", "load_config", "resolve", "dump_config", "apply_seed",
           "synth_config", "train_config", "pgd_config", "trigger_spec", "poison_plan", "defense_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_TRAIN = {"epochs": 15, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9, "seed": 0}

DEFAULTS: dict[str, Any] = {
    "outdir": "out",
    "seed": None,
    "data": {
        "n_train": 2000, "n_dev": 200, "n_test": 400, "sample_rate": 16000, "utterance_s": 1.2,
        "background_snr_db": 20.0, "seed": 0, "amplitude": 0.3,
        "slot_gain_db": [[-40.0, -10.0], [-3.0, 0.0], [-3.0, 0.0]],
        "vocab": None,
    },
    "proxy": dict(_TRAIN, seed=1000),
    "victim": dict(_TRAIN),
    "pgd": {"steps": 50, "step_size": None, "snr_bound_db": 30.0},
    "plan": {
        "kind": "CLBD_ranked", "poison_pct": 20.0, "source_class": 0, "target_class": 1, "selection_seed": 0,
        "trigger": {"snr_db": 20.0, "location": "start", "seed": 0, "clip": None, "duration_s": 0.25, "f0": 400.0},
    },
    "defense": {
        "name": "none", "heldout_kind": "CLBD_random", "heldout_pct": 10.0, "heldout_seed_offset": 7919, "fpr": 0.05,
        "detector": dict(_TRAIN),
        "denoiser": {"epochs": 30, "batch_size": 16, "learning_rate": 0.05, "momentum": 0.9, "seed": 0},
    },
    "sweep": {
        "type": "selection", "name": None, "kinds": ["DLBD", "CLBD_random"], "percentages": [5.0, 20.0, 50.0],
        "seeds": [0, 1, 2, 3, 4], "train_dbs": [20.0, 30.0, 40.0, 50.0], "test_dbs": [20.0, 30.0, 40.0, 50.0],
        "locations": ["start", "end", "random"], "defenses": ["none", "filter", "perfect", "denoise"],
        "n_seeds": 10, "first_seed": 0,
    },
    "inputs": {"data": None, "clean_data": None, "proxy": None, "model": None, "poison_manifest": None},
}

SWEEP_TYPES = ("poison_pct", "selection", "snr_grid", "location", "stability", "defense")


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    if not isinstance(update, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(update).__name__}")
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value if value is not None else {}, dotted + ".")
        else:
            out[key] = value
    return out


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    path, raw = item.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    node: Any = value
    for part in reversed(path.strip().split(".")):
        if not part:
            raise ConfigError(f"override {item!r} has an empty key segment")
        node = {part: node}
    return node


def resolve(doc: dict | None = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults <- document <- overrides, then validated."""
    cfg = _merge(DEFAULTS, doc or {})
    for item in overrides:
        cfg = _merge(cfg, _parse_override(item))
    _validate(cfg)
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> dict:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return resolve(doc, overrides)


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return path


def apply_seed(cfg: dict, seed: int | None) -> dict:
    """The run seed drives victim training, poison selection and trigger placement."""
    cfg = copy.deepcopy(cfg)
    if seed is None:
        return cfg
    cfg["seed"] = int(seed)
    cfg["victim"]["seed"] = int(seed)
    cfg["plan"]["selection_seed"] = int(seed)
    cfg["plan"]["trigger"]["seed"] = int(seed)
    return cfg


# ---------------------------------------------------------------- builders
# each builder re-raises construction errors as ConfigError naming the section

def _build(section: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def synth_config(cfg: dict) -> SynthConfig:
    d = dict(cfg["data"])
    vocab = d.pop("vocab")
    if vocab is not None:
        if not isinstance(vocab, dict) or set(vocab) != {"actions", "objects", "locations"}:
            raise ConfigError("data.vocab must map actions/objects/locations to name lists")
        d["vocab"] = _build("data.vocab", SlotVocab, tuple(vocab["actions"]), tuple(vocab["objects"]),
                            tuple(vocab["locations"]))
    d["slot_gain_db"] = tuple(tuple(r) for r in d["slot_gain_db"])
    if isinstance(d["background_snr_db"], str) and d["background_snr_db"].lower() in ("inf", "+inf"):
        d["background_snr_db"] = math.inf
    return _build("data", SynthConfig, **d)


def train_config(cfg: dict, section: str) -> M.TrainConfig:
    node = cfg
    for part in section.split("."):
        node = node[part]
    return _build(section, M.TrainConfig, **node)


def pgd_config(cfg: dict) -> A.PGDConfig:
    d = cfg["pgd"]
    budget = _build("pgd.snr_bound_db", lambda: PerturbationBudget(float(d["snr_bound_db"])))
    return _build("pgd", lambda: A.PGDConfig(int(d["steps"]), d["step_size"], budget))


def trigger_spec(cfg: dict, sample_rate: int = 16000):
    t = cfg["plan"]["trigger"]
    if t["clip"] is not None:
        path = Path(t["clip"])
        if not path.is_file():
            raise ConfigError(f"plan.trigger.clip: file not found: {path}")
        clip = load_wav(path)
    else:
        clip = _build("plan.trigger", lambda: synth_horn(float(t["duration_s"]), float(t["f0"]), sample_rate))
    loc = _build("plan.trigger.location", TriggerLocation.parse, t["location"])
    return _build("plan.trigger", lambda: TriggerSpec(clip, float(t["snr_db"]), loc, int(t["seed"])))


def poison_plan(cfg: dict, sample_rate: int = 16000) -> A.PoisonPlan:
    p = cfg["plan"]
    kind = _build("plan.kind", A.AttackKind.parse, p["kind"])
    trigger = trigger_spec(cfg, sample_rate)
    return _build("plan", lambda: A.PoisonPlan(kind, float(p["poison_pct"]), int(p["source_class"]),
                                               int(p["target_class"]), trigger, int(p["selection_seed"])))


def defense_config(cfg: dict) -> E.DefenseConfig:
    d = cfg["defense"]
    detector, denoiser = train_config(cfg, "defense.detector"), train_config(cfg, "defense.denoiser")
    return _build("defense", lambda: E.DefenseConfig(A.AttackKind.parse(d["heldout_kind"]), float(d["heldout_pct"]),
                                                     int(d["heldout_seed_offset"]), float(d["fpr"]), detector, denoiser))


def _validate(cfg: dict) -> None:
    if cfg["seed"] is not None and not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer or null")
    if cfg["defense"]["name"] not in E.DEFENSES:
        raise ConfigError(f"defense.name must be one of {E.DEFENSES}, got {cfg['defense']['name']!r}")
    if cfg["sweep"]["type"] not in SWEEP_TYPES:
        raise ConfigError(f"sweep.type must be one of {SWEEP_TYPES}, got {cfg['sweep']['type']!r}")
    for key in ("percentages", "seeds", "kinds", "train_dbs", "test_dbs", "locations", "defenses"):
        if not isinstance(cfg["sweep"][key], list) or not cfg["sweep"][key]:
            raise ConfigError(f"sweep.{key} must be a nonempty list")
    # build everything once so type and range errors surface at load time
    synth_config(cfg)
    for section in ("proxy", "victim", "defense.detector", "defense.denoiser"):
        train_config(cfg, section)
    pgd_config(cfg)
    poison_plan(cfg, int(cfg["data"]["sample_rate"]))
    defense_config(cfg)
