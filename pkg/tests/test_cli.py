import json
from pathlib import Path

import pytest

from slupoison import attack as A
from slupoison import cli
from slupoison import config as C
from slupoison import evaluation as E
from slupoison.dataset import generate_synthetic, load_manifest

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_CFG = FIXTURES / "golden.yaml"


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(root: Path, *extra) -> Path:
    """gen-data -> train-proxy -> craft -> train-victim -> evaluate; returns the metrics path."""
    common = ["--config", GOLDEN_CFG, *extra]
    data, proxy, poisoned, victim, ev = (root / d for d in ("data", "proxy", "poisoned", "victim", "eval"))
    assert run("gen-data", *common, "--outdir", data) == 0
    assert run("train-proxy", *common, "--data", data / "manifest.csv", "--outdir", proxy) == 0
    assert run("craft", *common, "--data", data / "manifest.csv", "--proxy", proxy / "proxy.npz", "--outdir", poisoned) == 0
    assert run("train-victim", *common, "--data", poisoned / "manifest.csv", "--outdir", victim) == 0
    assert run("evaluate", *common, "--data", poisoned / "manifest.csv", "--model", victim / "victim.npz",
               "--poison-manifest", poisoned / "poison_manifest.csv", "--outdir", ev) == 0
    return ev / "metrics.json"


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("golden")
    return root, pipeline(root)


def test_golden_pipeline_matches_committed_metrics(golden_run):
    _, metrics = golden_run
    assert json.loads(metrics.read_text()) == json.loads((FIXTURES / "golden_metrics.json").read_text())


def test_file_pipeline_equals_in_memory_run(golden_run):
    cfg = C.apply_seed(C.load_config(GOLDEN_CFG), 3)
    exp = E.Experiment(generate_synthetic(C.synth_config(cfg)), C.pgd_config(cfg), C.train_config(cfg, "proxy"),
                       C.train_config(cfg, "victim"), C.defense_config(cfg), quantize=True)
    m = exp.run(C.poison_plan(cfg), 3)[0]
    assert json.loads(golden_run[1].read_text()) == json.loads(json.dumps(m.to_dict()))


def test_outputs_and_snapshots(golden_run):
    root, _ = golden_run
    for step in ("data", "proxy", "poisoned", "victim", "eval"):
        assert (root / step / "config.resolved.yaml").is_file()
        assert json.loads((root / step / "run_info.json").read_text())["run_seed"] == 3
    assert (root / "data" / "manifest.vocab.json").is_file()
    assert (root / "proxy" / "proxy.history.json").is_file()
    records = A.read_poison_manifest(root / "poisoned" / "poison_manifest.csv")
    assert records and all(r.id in load_manifest(root / "poisoned" / "manifest.csv").by_id() for r in records)
    resolved = C.load_config(root / "eval" / "config.resolved.yaml")
    assert resolved["inputs"]["model"].endswith("victim.npz")


@pytest.mark.parametrize("name", ["perfect", "filter", "denoise"])
def test_defend(golden_run, name, tmp_path):
    root, _ = golden_run
    out = tmp_path / name
    code = run("defend", "--config", GOLDEN_CFG, "--set", f"defense.name={name}",
               "--data", root / "poisoned" / "manifest.csv", "--clean-data", root / "data" / "manifest.csv",
               "--proxy", root / "proxy" / "proxy.npz", "--poison-manifest", root / "poisoned" / "poison_manifest.csv",
               "--outdir", out)
    assert code == 0
    summary = json.loads((out / "defense.json").read_text())
    assert summary["defense"] == name
    kept = load_manifest(out / "manifest.csv")
    if name == "filter":
        assert (out / "filter_report.csv").is_file() and (out / "detector.npz").is_file()
        assert 0 <= summary["detector_auc"] <= 1
    if name == "denoise":
        assert (out / "denoiser.npz").is_file()
        assert len(kept) == len(load_manifest(root / "poisoned" / "manifest.csv"))


def test_sweep_writes_reports(tmp_path):
    code = run("sweep", "--config", GOLDEN_CFG, "--outdir", tmp_path, "--set", "sweep.type=selection",
               "--set", "sweep.percentages=[30]", "--set", "sweep.seeds=[0]", "--set", "sweep.name=sel")
    assert code == 0
    header, rows = E.read_report_csv(tmp_path / "sel.csv")
    assert header == ["poison_pct", "closer_to_source_ASR", "random_ASR", "further_to_source_ASR"]
    assert len(rows) == 1 and None not in rows[0]
    assert (tmp_path / "sel.md").is_file() and (tmp_path / "sel.runs.jsonl").is_file()


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert run() == 1
        assert run("fly") == 1
        assert run("gen-data", "--bogus") == 1

    def test_unknown_config_key_named(self, tmp_path, capsys):
        assert run("gen-data", "--outdir", tmp_path, "--set", "plan.poisonpct=3") == 1
        assert "'plan.poisonpct'" in capsys.readouterr().err

    def test_bad_yaml_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("victim: {epoch: 3}\n")
        assert run("gen-data", "--config", cfg, "--outdir", tmp_path) == 1
        assert "victim.epoch" in capsys.readouterr().err

    def test_missing_inputs(self, tmp_path, capsys):
        assert run("train-victim", "--outdir", tmp_path) == 1
        assert "inputs.data" in capsys.readouterr().err
        assert run("train-victim", "--outdir", tmp_path, "--data", tmp_path / "nope.csv") == 1

    def test_runtime_failure(self, tmp_path, capsys):
        bad = tmp_path / "manifest.csv"
        bad.write_text("not,a,manifest\n")
        assert run("train-victim", "--outdir", tmp_path / "o", "--data", bad) == 2
        assert "failed" in capsys.readouterr().err

    def test_defend_none_is_a_config_error(self, tmp_path):
        assert run("defend", "--outdir", tmp_path) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("--version")
        assert exc.value.code == 0
