import math

import numpy as np
import pytest

from slupoison.dataset import (
    SPLITS, Dataset, SlotVocab, SynthConfig, Utterance, generate_synthetic, load_manifest, matched_filter_decode,
    quantize_dataset, write_manifest,
)
from slupoison.signal import Waveform

from conftest import TINY


def test_split_sizes(tiny):
    assert [len(tiny.split(s)) for s in SPLITS] == [120, 30, 40]
    assert len(tiny) == 190


def test_generation_is_pure():
    cfg = SynthConfig(n_train=5, n_dev=2, n_test=3, seed=4)
    assert generate_synthetic(cfg) == generate_synthetic(cfg)
    assert generate_synthetic(cfg) != generate_synthetic(SynthConfig(n_train=5, n_dev=2, n_test=3, seed=5))


def test_prefix_stable_when_growing():
    small = generate_synthetic(SynthConfig(n_train=3, n_dev=1, n_test=1))
    big = generate_synthetic(SynthConfig(n_train=6, n_dev=1, n_test=1))
    assert small.split("train").utterances == big.split("train").utterances[:3]


def test_labels_cover_vocab(tiny):
    labels = tiny.labels()
    assert labels.shape == (190, 3)
    for slot, n in enumerate(tiny.vocab.sizes):
        assert set(labels[:, slot]) == set(range(n))


def test_noiseless_labels_decodable():
    ds = generate_synthetic(SynthConfig(n_train=40, n_dev=1, n_test=1, background_snr_db=math.inf))
    for u in ds:
        assert matched_filter_decode(u.wave, ds.vocab) == u.labels


def test_background_snr():
    ds = generate_synthetic(SynthConfig(n_train=3, n_dev=1, n_test=1, background_snr_db=20.0))
    clean = generate_synthetic(SynthConfig(n_train=3, n_dev=1, n_test=1, background_snr_db=math.inf))
    for a, b in zip(ds, clean):
        noise = a.wave.samples - b.wave.samples
        assert 10 * np.log10(np.mean(b.wave.samples**2) / np.mean(noise**2)) == pytest.approx(20.0, abs=1.5)


@pytest.mark.parametrize("kw", [{"n_train": 0}, {"utterance_s": -1.0}, {"slot_gain_db": ((0, -1), (0, 0), (0, 0))},
                                {"background_snr_db": math.nan}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


class TestDatasetContainer:
    def test_duplicate_ids(self):
        u = Utterance("a", Waveform(np.zeros(10)), 0, 0, 0)
        with pytest.raises(ValueError, match="duplicate"):
            Dataset([u, u], SlotVocab())

    def test_label_bounds(self):
        with pytest.raises(ValueError, match="outside vocabulary"):
            Dataset([Utterance("a", Waveform(np.zeros(10)), 2, 0, 0)], SlotVocab())

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            Utterance("a", Waveform(np.zeros(10)), 0, 0, 0, split="val")

    def test_replacements(self, tiny):
        first = tiny[0]
        new = tiny.with_replacements({first.id: first.replace(action=1 - first.action)})
        assert new[0].action != first.action and tiny[0] == first
        with pytest.raises(KeyError):
            tiny.with_replacements({"nope": first})

    def test_subset_and_without(self, tiny):
        ids = tiny.ids[:5]
        assert tiny.subset(ids).ids == ids
        assert len(tiny.without(ids)) == len(tiny) - 5


class TestManifest:
    def test_round_trip(self, tiny, tmp_path):
        path = write_manifest(tiny, tmp_path)
        back = load_manifest(path)
        assert back == quantize_dataset(tiny)
        assert back.vocab == tiny.vocab

    def test_vocab_order_survives_without_sidecar(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_train=4, n_dev=1, n_test=1, seed=2))
        path = write_manifest(ds, tmp_path)
        (tmp_path / "manifest.vocab.json").unlink()
        back = load_manifest(path, vocab=ds.vocab)
        assert back.labels().tolist() == ds.labels().tolist()

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,file\n")
        with pytest.raises(ValueError, match="header"):
            load_manifest(tmp_path / "m.csv")

    def test_errors_name_the_row(self, tiny, tmp_path):
        path = write_manifest(tiny.subset(tiny.ids[:3]), tmp_path)
        lines = path.read_text().splitlines()
        bad = lines[:2] + [lines[2].rsplit(",", 1)[0] + ",holdout"]
        path.write_text("\n".join(bad) + "\n")
        with pytest.raises(ValueError, match=r":3: .*holdout"):
            load_manifest(path)

    def test_missing_wav(self, tiny, tmp_path):
        path = write_manifest(tiny.subset(tiny.ids[:2]), tmp_path)
        (tmp_path / "wav" / f"{tiny.ids[1]}.wav").unlink()
        with pytest.raises(FileNotFoundError, match=tiny.ids[1]):
            load_manifest(path)

    def test_malformed_row(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,path,action,object,location,split\na,b\n")
        with pytest.raises(ValueError, match="malformed"):
            load_manifest(tmp_path / "m.csv")


def test_default_corpus_matches_declared_shape():
    cfg = SynthConfig()
    assert (cfg.n_train, cfg.n_dev, cfg.n_test) == (2000, 200, 400)
    assert cfg.n_samples == int(1.2 * 16000) and TINY.sample_rate == 16000
