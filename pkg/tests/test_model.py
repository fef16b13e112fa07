import numpy as np
import pytest
from sklearn.base import clone

from slupoison import model as M
from slupoison.signal import Waveform

from gradcheck import check_input_grads, check_param_grads, random_pair


def test_param_gradients_match_finite_differences(rng):
    p, waves, labels = random_pair(rng)
    assert check_param_grads(p, waves, labels, rng, 30).max() <= 1e-4


def test_input_gradient_matches_finite_differences(rng):
    p, waves, _ = random_pair(rng)
    assert check_input_grads(p, Waveform(waves[1]), 2, 1, rng, 20).max() <= 1e-4


def test_binary_head_gradients(rng):
    p = M.init_params((1,), seed=3, n_conv=1, binary=True)
    waves = rng.normal(0, 0.1, (4, 3000))
    labels = np.array([[0], [1], [1], [0]])
    assert check_param_grads(p, waves, labels, rng, 20).max() <= 1e-4


def test_loss_is_sum_of_slot_cross_entropies(rng):
    p, waves, labels = random_pair(rng)
    logits = M.forward(p, waves[0])
    ce = sum(-(z[c] - np.log(np.sum(np.exp(z)))) for z, c in zip(logits, labels[0]))
    assert M.loss(p, waves[0], labels[0]) == pytest.approx(ce)


def test_batch_loss_is_mean(rng):
    p, waves, labels = random_pair(rng)
    per = [M.loss(p, w, l) for w, l in zip(waves, labels)]
    assert M.batch_loss(p, waves, labels) == pytest.approx(np.mean(per))


def test_predict_shapes(tiny_model, tiny):
    w = tiny[0].wave
    assert isinstance(M.predict(tiny_model, w), tuple)
    assert M.predict_dataset(tiny_model, tiny).shape == (len(tiny), 3)


def test_label_validation(rng):
    p, waves, _ = random_pair(rng)
    with pytest.raises(ValueError):
        M.loss(p, waves[0], (5, 0, 0))
    with pytest.raises(ValueError):
        M.grad_input(p, Waveform(waves[0]), (0, 9))


def test_training_reduces_loss_and_learns(tiny):
    params, hist = M.train(tiny, M.TrainConfig(epochs=6, seed=1))
    assert hist[-1] < hist[0]
    acc = np.mean(M.predict_dataset(params, tiny.split("train")) == tiny.split("train").labels())
    assert acc > 0.6


def test_training_is_bit_stable(tiny):
    cfg = M.TrainConfig(epochs=2, seed=7)
    a, ha = M.train(tiny, cfg)
    b, hb = M.train(tiny, cfg)
    assert a.equals(b) and ha == hb
    c, _ = M.train(tiny, cfg.replace(seed=8))
    assert not a.equals(c)


def test_checkpoint_round_trip(tiny_model, tmp_path):
    M.save_params(tiny_model, tmp_path / "m.npz")
    back = M.load_params(tmp_path / "m.npz")
    assert back.equals(tiny_model)
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValueError, match="not a parameter checkpoint"):
        M.load_params(tmp_path / "x.npz")


def test_per_sample_loss_matches_loss(tiny_model, tiny):
    d = M.per_sample_loss(tiny_model, tiny.split("dev"))
    u = tiny.split("dev")[3]
    assert d[u.id] == pytest.approx(M.loss(tiny_model, u.wave, u.labels))


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"momentum": 1.0}, {"learning_rate": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        M.TrainConfig(**kw)


class TestEstimator:
    def test_params_and_clone(self):
        est = M.SlotFillingClassifier(epochs=3, seed=2)
        assert est.get_params()["epochs"] == 3
        assert clone(est).get_params() == est.get_params()

    def test_fit_matches_functional_train(self, tiny):
        train = tiny.split("train")
        est = M.SlotFillingClassifier(epochs=2, seed=4, head_sizes=tiny.vocab.sizes).fit(train.waves(), train.labels())
        ref, _ = M.train(tiny, M.TrainConfig(epochs=2, seed=4))
        assert est.params_.equals(ref)
        assert est.predict(train.waves()).shape == (len(train), 3)
        assert 0.0 <= est.score(train.waves(), train.labels()) <= 1.0

    def test_unfitted(self, tiny):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            M.SlotFillingClassifier().predict(tiny.waves()[:2])
