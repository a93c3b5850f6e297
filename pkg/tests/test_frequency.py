import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medttt.frequency import (
    FrequencyConfigError,
    HighPassConfig,
    dft2,
    dft2_direct,
    extract_high_freq,
    frequency_features,
    highpass_filter,
    idft2,
)

shapes = st.tuples(st.sampled_from([1, 2, 3, 4, 5, 6, 8, 12, 16]), st.sampled_from([1, 2, 4, 7, 8, 16]))


def test_impulse_2x2():
    f = dft2(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert np.allclose(f.real, 1.0) and np.allclose(f.imag, 0.0) and np.allclose(f.magnitude, 1.0)


def test_constant_image_is_dc_only():
    f = dft2(np.full((4, 6), 0.7))
    expected = np.zeros((4, 6))
    expected[0, 0] = 0.7 * 24
    assert np.allclose(f.real, expected, atol=1e-12) and np.allclose(f.imag, 0.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_fft_matches_direct_dft(shape, seed):
    img = np.random.default_rng(seed).uniform(-1, 1, shape)
    assert np.max(np.abs(dft2(img).spectrum - dft2_direct(img))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_parseval(shape, seed):
    img = np.random.default_rng(seed).uniform(-1, 1, shape)
    lhs = np.sum(img**2)
    rhs = np.sum(dft2(img).magnitude ** 2) / img.size
    assert abs(lhs - rhs) <= 1e-9 * max(lhs, 1e-300)


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_round_trip(shape, seed):
    img = np.random.default_rng(seed).uniform(-1, 1, shape)
    assert np.max(np.abs(idft2(dft2(img)) - img)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (8, 8))
    lhs = dft2(a * x + b * y).spectrum
    assert np.max(np.abs(lhs - (a * dft2(x).spectrum + b * dft2(y).spectrum))) < 1e-9


def test_magnitude_and_hermitian_symmetry():
    img = np.random.default_rng(0).uniform(size=(6, 8))
    f = dft2(img)
    assert np.allclose(f.magnitude, np.sqrt(f.real**2 + f.imag**2), atol=1e-12)
    F = f.spectrum
    H, W = F.shape
    for u in range(H):
        for v in range(W):
            assert abs(F[u, v] - np.conj(F[(H - u) % H, (W - v) % W])) < 1e-9


@pytest.mark.parametrize("transition", ["hard", "gaussian"])
def test_constant_image_highpass_is_zero(transition):
    cfg = HighPassConfig(0.3, transition)
    assert np.max(np.abs(extract_high_freq(np.full((8, 8), 0.42), cfg))) < 1e-9
    f = highpass_filter(dft2(np.full((8, 8), 0.42)), cfg)
    assert np.max(np.abs(f.spectrum)) < 1e-9


def test_tiny_cutoff_removes_only_dc():
    img = np.random.default_rng(1).uniform(size=(8, 8))
    out = extract_high_freq(img, HighPassConfig(1e-9))
    assert np.max(np.abs(out - (img - img.mean()))) < 1e-12


def test_checkerboard_survives_any_cutoff():
    img = (np.indices((8, 8)).sum(axis=0) % 2).astype(float) - 0.5
    for c in (0.05, 0.5, 0.9, 0.999):
        assert np.max(np.abs(extract_high_freq(img, HighPassConfig(c)) - img)) < 1e-12


def test_highpass_output_zero_mean_and_real():
    rng = np.random.default_rng(2)
    for shape in [(8, 8), (6, 10), (16, 4)]:
        img = rng.uniform(size=shape)
        out = extract_high_freq(img)
        assert abs(out.mean()) < 1e-9
        complex_out = idft2(highpass_filter(dft2(img)))
        assert np.max(np.abs(complex_out.imag)) < 1e-9


def test_hard_filter_idempotent():
    f = dft2(np.random.default_rng(3).uniform(size=(8, 8)))
    cfg = HighPassConfig(0.4)
    once = highpass_filter(f, cfg)
    assert np.array_equal(highpass_filter(once, cfg).spectrum, once.spectrum)


def test_multichannel_is_per_channel():
    img = np.random.default_rng(4).uniform(size=(3, 8, 8))
    out = extract_high_freq(img)
    for c in range(3):
        assert np.array_equal(out[c], extract_high_freq(img[c]))


def test_frequency_features_bundle():
    img = np.random.default_rng(5).uniform(size=(8, 8))
    ff = frequency_features(img)
    assert np.array_equal(ff.highpass, extract_high_freq(img))
    assert np.allclose(ff.real + 1j * ff.imag, dft2(img).spectrum)


@pytest.mark.parametrize("cutoff", [0.0, 1.0, -0.1, 2.0])
def test_cutoff_outside_open_unit_interval_rejected(cutoff):
    with pytest.raises(FrequencyConfigError):
        HighPassConfig(cutoff)


def test_unknown_transition_rejected():
    with pytest.raises(FrequencyConfigError):
        HighPassConfig(0.1, "cosine")
