import json

import numpy as np
import pytest

from slupoison import attack as A
from slupoison import evaluation as E
from slupoison import model as M
from slupoison.dataset import Dataset
from slupoison.signal import PCM_SCALE

FAST = M.TrainConfig(epochs=3, seed=0)


@pytest.fixture(scope="module")
def exp(tiny):
    defense = E.DefenseConfig(heldout_pct=30, detector=M.TrainConfig(epochs=3), denoiser=M.TrainConfig(epochs=3))
    return E.Experiment(tiny, A.PGDConfig(steps=4), FAST.replace(seed=1000), FAST, defense)


def plan(kind="CLBD_ranked", pct=20):
    return A.PoisonPlan(kind=kind, poison_pct=pct)


class TestMetrics:
    def test_ifer_counts_slots(self, tiny, tiny_model):
        test = tiny.split("test")
        wrong = (M.predict_dataset(tiny_model, test) != test.labels()).sum()
        assert E.ifer(tiny_model, test) == pytest.approx(100 * wrong / (3 * len(test)))

    def test_asr_only_counts_source_class(self, tiny, tiny_model):
        test = tiny.split("test")
        pred = M.predict_dataset(tiny_model, test)[:, 0]
        src = test.labels()[:, 0] == 0
        assert E.attack_success_rate(tiny_model, test, 0, 1) == pytest.approx(100 * np.mean(pred[src] == 1))

    def test_empty_inputs(self, tiny, tiny_model):
        with pytest.raises(ValueError):
            E.ifer(tiny_model, Dataset([], tiny.vocab))
        only_target = Dataset([u for u in tiny if u.action == 1], tiny.vocab)
        with pytest.raises(ValueError, match="eligible"):
            E.attack_success_rate(tiny_model, only_target, 0, 1)

    def test_run_metrics_validation(self):
        with pytest.raises(ValueError):
            E.RunMetrics(101.0, 0.0, 1, 0, 0, {})
        with pytest.raises(ValueError):
            E.RunMetrics(0.0, 0.0, -1, 0, 0, {})
        m = E.RunMetrics(1.5, 2.5, 10, 3, 7, {"kind": "DLBD"}, detector_auc=0.75)
        assert E.RunMetrics.from_dict(json.loads(json.dumps(m.to_dict()))) == m


class TestExperiment:
    def test_run_is_deterministic_and_cached(self, exp, tiny):
        a = exp.run(plan(), 3)[0]
        b = E.Experiment(tiny, exp.pgd, exp.proxy_cfg, exp.victim_cfg, exp.defense).run(plan(), 3)[0]
        assert a == b
        assert exp.run(plan(), 3)[0] == a

    def test_metrics_fields(self, exp):
        m = exp.run(plan(), 0)[0]
        assert m.poison_count == A.poison_count(len(A.eligible_pool(exp.dataset, plan(), exp.proxy)), 20)
        assert m.eligible_test_count == sum(u.action == 0 for u in exp.dataset.split("test"))
        assert m.plan["selection_seed"] == 0 and m.seed == 0
        assert 0 <= m.impersonation_rate <= 1

    def test_benign_plan(self, exp):
        m = exp.run(plan("none"), 0)[0]
        assert m.poison_count == 0 and m.impersonation_rate is None

    def test_one_victim_many_test_snrs(self, exp):
        runs = exp.run(plan(), 0, test_snrs=[10.0, 20.0])
        assert [r.test_trigger_snr_db for r in runs] == [10.0, 20.0]
        assert runs[1] == exp.run(plan(), 0)[0]

    @pytest.mark.parametrize("name", ["perfect", "filter", "denoise"])
    def test_defenses(self, exp, name):
        m = exp.run(plan(), 0, defense=name)[0]
        assert m.defense == name
        if name == "perfect":
            assert m.removed_count == m.poison_count
        if name == "filter":
            assert 0 <= m.detector_auc <= 1 and m.removed_count >= 0

    def test_unknown_defense(self, exp):
        with pytest.raises(ValueError):
            exp.run(plan(), 0, defense="magic")

    def test_quantized_experiment_keeps_pcm_grid(self, tiny):
        q = E.Experiment(tiny, A.PGDConfig(steps=2), FAST.replace(seed=1000), FAST, quantize=True)
        poisoned, _ = q.craft(plan())
        s = np.concatenate([u.wave.samples for u in poisoned]) * PCM_SCALE
        assert np.array_equal(s, np.round(s))

    def test_run_experiment_wrapper(self, exp, tiny):
        m = E.run_experiment(tiny, plan(), exp.pgd, exp.proxy_cfg, exp.victim_cfg, seed=3)
        assert m == exp.run(plan(), 3)[0]


class TestSweeps:
    def test_single_cell_sweep_equals_run(self, exp):
        res = E.sweep_poison_pct(exp, plan(), ["CLBD_ranked"], [20.0], [0, 1])
        assert res.columns == ["CLBD_ranked_ASR"]
        assert res.cells[(20.0, "CLBD_ranked_ASR")].runs == [exp.run(plan(), s)[0] for s in (0, 1)]

    def test_table_columns(self, exp):
        assert E.sweep_poison_pct(exp, plan(), ["DLBD", "CLBD_random"], [20.0], [0]).columns == ["DLBD_ASR", "CLBD_ASR"]
        assert E.sweep_selection(exp, plan(), [20.0], [0]).columns == [
            "closer_to_source_ASR", "random_ASR", "further_to_source_ASR"]
        res = E.sweep_snr_grid(exp, plan(), [20.0], [20.0, 50.0], [0])
        assert res.rows == [20.0, 50.0] and res.columns == ["train_20dB_ASR"]
        assert E.sweep_location(exp, plan(), ["start", "end"], [20.0], [0]).columns == ["start_ASR", "end_ASR"]
        assert E.defense_eval(exp, plan(), [20.0], ["none", "filter"], [0]).columns == [
            "undefended_ASR", "filter_ASR", "filter_AUC"]

    def test_stability(self, exp):
        st = E.stability_study(exp, plan(), n_seeds=3)
        asr = [r.asr_pct for r in st["runs"]]
        assert st["n"] == 3 and st["std"] == pytest.approx(np.std(asr)) and st["min"] == min(asr)
        tab = E.stability_table([st])
        assert tab.value(20.0, "std_ASR") == pytest.approx(st["std"])

    def test_failed_cell_is_reported(self, exp, tmp_path, monkeypatch):
        real = exp.run

        def flaky(p, seed, *a, **k):
            if p.poison_pct == 50.0:
                raise RuntimeError("boom")
            return real(p, seed, *a, **k)

        monkeypatch.setattr(exp, "run", flaky)
        res = E.sweep_poison_pct(exp, plan(), ["CLBD_ranked"], [20.0, 50.0], [0])
        assert res.cells[(50.0, "CLBD_ranked_ASR")].error == "RuntimeError: boom"
        assert res.value(20.0, "CLBD_ranked_ASR") is not None
        csv_path = E.emit_report(res, tmp_path)[0]
        assert "FAILED" in csv_path.read_text()

    def test_duplicate_cell(self):
        res = E.SweepResult("x", "a", "r", ["c"])
        res.add(1, "c", E.Cell())
        with pytest.raises(ValueError):
            res.add(1, "c", E.Cell())
        with pytest.raises(KeyError):
            res.add(2, "d", E.Cell())


class TestReports:
    def result(self):
        res = E.SweepResult("demo", "axis", "poison_pct", ["a_ASR", "b_ASR"])
        m = lambda asr: E.RunMetrics(0.0, asr, 4, 1, 0, {})
        res.add(5.0, "a_ASR", E.Cell([m(1 / 3), m(50.0), m(75.0)]))
        res.add(5.0, "b_ASR", E.Cell([], error="boom"))
        return res

    def test_csv_round_trip(self, tmp_path):
        paths = E.emit_report(self.result(), tmp_path)
        assert [p.name for p in paths] == ["demo.csv", "demo.md", "demo.runs.jsonl"]
        header, rows = E.read_report_csv(tmp_path / "demo.csv")
        assert header == ["poison_pct", "a_ASR", "b_ASR"]
        assert rows == [[5.0, 50.0, None]]

    def test_exact_float_round_trip(self, tmp_path):
        res = E.SweepResult("f", "axis", "r", ["c"])
        res.add(0.1, "c", E.Cell([E.RunMetrics(0.0, 1 / 3, 4, 1, 0, {})]))
        E.emit_report(res, tmp_path)
        assert E.read_report_csv(tmp_path / "f.csv")[1] == [[0.1, 1 / 3]]

    def test_markdown_and_jsonl(self, tmp_path):
        E.emit_report(self.result(), tmp_path)
        md = (tmp_path / "demo.md").read_text()
        assert "| 5.0 | 50.0 | FAILED |" in md
        lines = (tmp_path / "demo.runs.jsonl").read_text().splitlines()
        assert len(lines) == 3 and json.loads(lines[0])["column"] == "a_ASR"

    def test_empty_result(self, tmp_path):
        with pytest.raises(ValueError):
            E.emit_report(E.SweepResult("e", "a", "r", ["c"]), tmp_path)
