import math

import pytest
import yaml

from slupoison import attack as A
from slupoison import config as C
from slupoison.signal import TriggerLocation


def test_defaults_resolve():
    cfg = C.resolve()
    assert cfg == C.DEFAULTS and cfg is not C.DEFAULTS
    plan = C.poison_plan(cfg)
    assert plan.kind is A.AttackKind.CLBD_RANKED and plan.poison_pct == 20.0
    assert C.train_config(cfg, "proxy").seed == 1000
    assert C.pgd_config(cfg).steps == 50


def test_document_and_overrides_layer():
    cfg = C.resolve({"plan": {"poison_pct": 5}}, ["plan.poison_pct=7.5", "plan.trigger.location=end"])
    assert cfg["plan"]["poison_pct"] == 7.5
    assert C.trigger_spec(cfg).location is TriggerLocation.END
    assert cfg["plan"]["kind"] == "CLBD_ranked"


@pytest.mark.parametrize("doc,key", [
    ({"plan": {"poison_percent": 3}}, "plan.poison_percent"),
    ({"nope": 1}, "nope"),
    ({"defense": {"detector": {"lr": 1}}}, "defense.detector.lr"),
])
def test_unknown_keys_are_named(doc, key):
    with pytest.raises(C.ConfigError, match=f"'{key}'"):
        C.resolve(doc)


@pytest.mark.parametrize("override,fragment", [
    ("plan.poison_pct=200", "plan"),
    ("plan.kind=sneaky", "plan.kind"),
    ("victim.epochs=zero", "victim"),
    ("defense.name=magic", "defense.name"),
    ("sweep.type=everything", "sweep.type"),
    ("sweep.seeds=[]", "sweep.seeds"),
    ("pgd.snr_bound_db=loud", "pgd"),
    ("data.n_train=-5", "data"),
    ("plan.trigger.clip=/no/such.wav", "plan.trigger.clip"),
    ("seed=1.5", "seed"),
    ("noequals", "key.path=value"),
])
def test_bad_values_are_config_errors(override, fragment):
    with pytest.raises(C.ConfigError, match=fragment.replace(".", r"\.")):
        C.resolve(overrides=[override])


def test_override_values_are_yaml_typed():
    cfg = C.resolve(overrides=["sweep.percentages=[1, 2.5]", "data.background_snr_db=inf", "outdir=runs/x"])
    assert cfg["sweep"]["percentages"] == [1, 2.5]
    assert math.isinf(C.synth_config(cfg).background_snr_db)
    assert cfg["outdir"] == "runs/x"


def test_apply_seed():
    cfg = C.apply_seed(C.resolve(), 9)
    assert (cfg["victim"]["seed"], cfg["plan"]["selection_seed"], cfg["plan"]["trigger"]["seed"]) == (9, 9, 9)
    assert cfg["proxy"]["seed"] == 1000
    assert C.apply_seed(cfg, None) == cfg


def test_dump_load_round_trip(tmp_path):
    cfg = C.resolve(overrides=["plan.poison_pct=3"])
    path = C.dump_config(cfg, tmp_path / "c.yaml")
    assert C.load_config(path) == cfg


def test_load_errors(tmp_path):
    with pytest.raises(C.ConfigError, match="not found"):
        C.load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("plan: [unclosed\n")
    with pytest.raises(C.ConfigError, match="YAML"):
        C.load_config(bad)
    bad.write_text("- a list\n")
    with pytest.raises(C.ConfigError, match="mapping"):
        C.load_config(bad)


def test_custom_vocab(tmp_path):
    vocab = {"actions": ["on", "off"], "objects": ["a", "b"], "locations": ["x", "y"]}
    cfg = C.resolve({"data": {"vocab": vocab}})
    assert C.synth_config(cfg).vocab.actions == ("on", "off")
    with pytest.raises(C.ConfigError, match="data.vocab"):
        C.resolve({"data": {"vocab": {"actions": ["a"]}}})


def test_golden_fixture_is_a_valid_config():
    from pathlib import Path
    cfg = C.load_config(Path(__file__).parent / "fixtures" / "golden.yaml")
    assert cfg["seed"] == 3 and yaml.safe_dump(cfg)
