import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from slupoison import frontend as F


def naive_frames(x):
    return sliding_window_view(x, F.FRAME, axis=-1)[..., :: F.HOP, :]


def test_project_matches_naive_framing(rng):
    x = rng.normal(size=(3, 5000))
    ref = naive_frames(x) @ F.cosine_bank(16000).T
    np.testing.assert_allclose(F.project(x), ref, atol=1e-12)


@given(n=st.integers(F.FRAME, 3000), seed=st.integers(0, 1000))
def test_overlap_add_is_adjoint_of_framing(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    D = rng.normal(size=(F.n_frames(n), F.FRAME))
    assert np.sum(F.frame(x) * D) == pytest.approx(np.dot(x, F.overlap_add(D, n)), rel=1e-10)


def test_unit_tone_projects_to_one():
    freq = F.ANALYSIS_FREQS[3]
    t = np.arange(F.FRAME) / 16000
    p = F.project(np.cos(2 * np.pi * freq * t))
    assert p[0, 3] == pytest.approx(1.0, abs=0.05)


def test_bands_avoid_hop_harmonics():
    assert all(f % 100 in (25, 75) for f in F.ANALYSIS_FREQS)
    assert len(F.ANALYSIS_FREQS) == F.N_FEATURES


def test_silence_gives_zero_features():
    assert np.all(F.features(np.zeros(1000)) == 0.0)


def test_short_input_rejected():
    with pytest.raises(ValueError, match="shorter than one frame"):
        F.features(np.zeros(F.FRAME - 1))


def test_features_backward_matches_finite_differences(rng):
    x = rng.normal(0, 0.1, 900)
    W = rng.normal(size=F.features(x).shape)
    g = F.features_backward(W, F.project(x), len(x))
    h = 1e-6
    for i in rng.choice(len(x), 20, replace=False):
        e = np.zeros_like(x)
        e[i] = h
        fd = (np.sum(W * F.features(x + e)) - np.sum(W * F.features(x - e))) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
