"""``slupoison`` command line.

Every subcommand takes ``--config``, ``--set key.path=value`` overrides,
``--outdir`` and ``--seed`` and writes ``config.resolved.yaml`` and
``run_info.json`` into its output directory.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import attack as A
from . import config as C
from . import defense as D
from . import evaluation as E
from . import model as M
from .dataset import generate_synthetic, load_manifest, write_manifest

log = logging.getLogger("slupoison")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


INPUT_FLAGS = {
    "--data": "data",
    "--clean-data": "clean_data",
    "--proxy": "proxy",
    "--model": "model",
    "--poison-manifest": "poison_manifest",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. plan.poison_pct=20 (repeatable)")
    common.add_argument("--outdir", help="output directory (overrides the config's outdir)")
    common.add_argument("--seed", type=int, help="run seed: victim training, poison selection, trigger placement")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, key in INPUT_FLAGS.items():
        common.add_argument(flag, dest=f"in_{key}", help=f"same as --set inputs.{key}=PATH")

    parser = _Parser(prog="slupoison", description="Backdoor poisoning experiments on a synthetic spoken-command corpus.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "write the synthetic corpus (WAVs + manifest)",
        "train-proxy": "train the attacker's proxy model on --data",
        "train-victim": "train a victim model on --data",
        "craft": "poison --data using --proxy; writes the poisoned corpus and poison manifest",
        "defend": "filter, perfect-filter or denoise a poisoned corpus",
        "evaluate": "benign IFER and triggered ASR of --model on the test split of --data",
        "sweep": "run the sweep declared in the config and write reports",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


# ---------------------------------------------------------------- helpers

def _resolve(args) -> dict:
    overrides = list(args.overrides)
    for flag, key in INPUT_FLAGS.items():
        value = getattr(args, f"in_{key}")
        if value is not None:
            overrides.append(f"inputs.{key}={value}")
    if args.outdir is not None:
        overrides.append(f"outdir={args.outdir}")
    cfg = C.load_config(args.config, overrides)
    return C.apply_seed(cfg, args.seed if args.seed is not None else cfg["seed"])


def _run_seed(cfg: dict) -> int:
    return cfg["seed"] if cfg["seed"] is not None else int(cfg["victim"]["seed"])


def _input(cfg: dict, key: str, required: bool = True) -> Path | None:
    value = cfg["inputs"][key]
    if value is None:
        if required:
            raise C.ConfigError(f"inputs.{key} is required for this command (use --{key.replace('_', '-')})")
        return None
    path = Path(value)
    if not path.exists():
        raise C.ConfigError(f"inputs.{key}: file not found: {path}")
    return path


def _snapshot(cfg: dict, command: str) -> Path:
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    C.dump_config(cfg, outdir / "config.resolved.yaml")
    info = {"tool": "slupoison", "version": __version__, "command": command, "run_seed": _run_seed(cfg),
            "numpy": np.__version__, "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (outdir / "run_info.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    return outdir


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _experiment(cfg: dict, dataset) -> E.Experiment:
    return E.Experiment(dataset, C.pgd_config(cfg), C.train_config(cfg, "proxy"), C.train_config(cfg, "victim"),
                        C.defense_config(cfg), quantize=True)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, outdir):
    ds = generate_synthetic(C.synth_config(cfg))
    path = write_manifest(ds, outdir)
    print(f"wrote {len(ds)} utterances to {path}")


def _train(cfg, outdir, section, name):
    ds = load_manifest(_input(cfg, "data"))
    params, history = M.train(ds, C.train_config(cfg, section))
    M.save_params(params, outdir / f"{name}.npz")
    _write_json(outdir / f"{name}.history.json", history)
    print(f"wrote {outdir / f'{name}.npz'} (final loss {history[-1]:.4f})")


def cmd_craft(cfg, outdir):
    ds = load_manifest(_input(cfg, "data"))
    proxy = M.load_params(_input(cfg, "proxy"))
    plan = C.poison_plan(cfg, ds.utterances[0].wave.sample_rate)
    exp = _experiment(cfg, ds)
    exp.proxy = proxy
    poisoned, records = exp.craft(plan)
    write_manifest(poisoned, outdir)
    A.write_poison_manifest(records, outdir / "poison_manifest.csv")
    print(f"crafted {len(records)} {plan.kind.value} poisons -> {outdir / 'manifest.csv'}")


def cmd_defend(cfg, outdir):
    name = cfg["defense"]["name"]
    if name == "none":
        raise C.ConfigError("defense.name must be filter, perfect or denoise for the defend command")
    poisoned = load_manifest(_input(cfg, "data"))
    records_path = _input(cfg, "poison_manifest", required=name == "perfect")
    records = A.read_poison_manifest(records_path) if records_path else []
    clean = proxy = None
    if name in ("filter", "denoise"):
        clean = load_manifest(_input(cfg, "clean_data"))
        proxy = M.load_params(_input(cfg, "proxy"))
    exp = _experiment(cfg, clean if clean is not None else poisoned)
    if proxy is not None:
        exp.proxy = proxy
    plan = C.poison_plan(cfg, poisoned.utterances[0].wave.sample_rate)
    defended, extra = exp.apply_defense(name, poisoned, records, plan, _run_seed(cfg))
    write_manifest(defended, outdir)
    if name == "filter":
        D.write_filter_report(extra["scores"], outdir / "filter_report.csv")
        M.save_params(extra["detector"], outdir / "detector.npz")
    if name == "denoise":
        D.save_denoiser(extra["denoiser"], outdir / "denoiser.npz")
    summary = {k: v for k, v in extra.items() if k in ("detector_auc", "removed_count", "threshold")}
    _write_json(outdir / "defense.json", {"defense": name, **summary})
    print(f"{name}: {len(defended.split('train'))} training utterances kept -> {outdir / 'manifest.csv'}")


def cmd_evaluate(cfg, outdir):
    ds = load_manifest(_input(cfg, "data"))
    victim = M.load_params(_input(cfg, "model"))
    records_path = _input(cfg, "poison_manifest", required=False)
    records = A.read_poison_manifest(records_path) if records_path else []
    plan = C.poison_plan(cfg, ds.utterances[0].wave.sample_rate)
    metrics = E.evaluate_victim(victim, ds.split("test"), plan, records, _run_seed(cfg), cfg["defense"]["name"])[0]
    _write_json(outdir / "metrics.json", metrics.to_dict())
    print(f"IFER {metrics.benign_ifer_pct:.2f}%  ASR {metrics.asr_pct:.2f}% "
          f"({metrics.eligible_test_count} eligible test utterances)")


def cmd_sweep(cfg, outdir):
    s = cfg["sweep"]
    ds = generate_synthetic(C.synth_config(cfg)) if cfg["inputs"]["data"] is None else load_manifest(_input(cfg, "data"))
    exp = _experiment(cfg, ds)
    if cfg["inputs"]["proxy"] is not None:
        exp.proxy = M.load_params(_input(cfg, "proxy"))
    base = C.poison_plan(cfg, ds.utterances[0].wave.sample_rate)
    seeds = [int(x) for x in s["seeds"]]
    pcts = [float(x) for x in s["percentages"]]
    kind = s["type"]
    if kind == "poison_pct":
        res = E.sweep_poison_pct(exp, base, s["kinds"], pcts, seeds, **_name(s))
    elif kind == "selection":
        res = E.sweep_selection(exp, base, pcts, seeds, **_name(s))
    elif kind == "snr_grid":
        res = E.sweep_snr_grid(exp, base, [float(x) for x in s["train_dbs"]], [float(x) for x in s["test_dbs"]], seeds,
                               **_name(s))
    elif kind == "location":
        res = E.sweep_location(exp, base, s["locations"], pcts, seeds, **_name(s))
    elif kind == "stability":
        studies = [E.stability_study(exp, base.replace(poison_pct=p), int(s["n_seeds"]), int(s["first_seed"]))
                   for p in pcts]
        res = E.stability_table(studies, **_name(s))
    else:
        res = E.defense_eval(exp, base, pcts, s["defenses"], seeds, **_name(s))
    paths = E.emit_report(res, outdir)
    print("\n".join(str(p) for p in paths))
    failed = [k for k, c in res.cells.items() if c.error]
    if failed:
        raise RuntimeError(f"{len(failed)} sweep cell(s) failed: {failed}")


def _name(s: dict) -> dict:
    return {"name": s["name"]} if s["name"] else {}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-proxy": lambda cfg, out: _train(cfg, out, "proxy", "proxy"),
    "train-victim": lambda cfg, out: _train(cfg, out, "victim", "victim"),
    "craft": cmd_craft,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"slupoison: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        outdir = _snapshot(cfg, args.command)
        COMMANDS[args.command](cfg, outdir)
    except C.ConfigError as exc:
        print(f"slupoison: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything past validation is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"slupoison: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
