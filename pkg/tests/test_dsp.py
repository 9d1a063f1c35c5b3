import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arrayssl.dsp import (
    dft,
    direct_dft,
    frame_to_stft,
    hann_window,
    mask_batch,
    mask_channels,
    preprocess_frames,
    standardize,
)
from arrayssl.errors import DegenerateExampleWarning, ParameterError, ShapeError

# 99th percentile of chi-square with 3 degrees of freedom
CHI2_3DOF_P01 = 11.345


def test_hann_n4():
    np.testing.assert_allclose(hann_window(4), [0.0, 0.5, 1.0, 0.5], atol=1e-15)


@pytest.mark.parametrize("n", [2, 6, 8, 64, 2048])
def test_hann_start_and_mean(n):
    w = hann_window(n)
    assert w[0] == 0.0
    assert w.sum() / n == pytest.approx(0.5, abs=1e-12)


def test_hann_rejects_short():
    with pytest.raises(ParameterError):
        hann_window(1)


def test_dft_constant():
    np.testing.assert_allclose(dft(np.ones(8, complex)), [8, 0, 0, 0, 0, 0, 0, 0], atol=1e-12)


def test_dft_single_tone():
    m = np.arange(8)
    out = dft(np.exp(2j * np.pi * 3 * m / 8))
    expected = np.zeros(8, complex)
    expected[3] = 8
    np.testing.assert_allclose(out, expected, atol=1e-9)


@pytest.mark.parametrize("n", [8, 64, 2048])
def test_fft_matches_direct_sum(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    assert np.max(np.abs(dft(x) - direct_dft(x))) < 1e-9


def test_direct_dft_literal_sum():
    # the oracle itself against the textbook double loop
    rng = np.random.default_rng(0)
    x = rng.standard_normal(12) + 1j * rng.standard_normal(12)
    lit = np.array([sum(x[m] * np.exp(-2j * np.pi * k * m / 12) for m in range(12)) for k in range(12)])
    np.testing.assert_allclose(direct_dft(x), lit, atol=1e-12)


def test_non_power_of_two_falls_back():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(12) + 0j
    np.testing.assert_allclose(dft(x), direct_dft(x))


def test_dft_batched_rows_independent():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 5, 16)) + 1j * rng.standard_normal((3, 5, 16))
    out = dft(x)
    np.testing.assert_allclose(out[1, 2], direct_dft(x[1, 2]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([16, 64, 256]))
def test_parseval_on_windowed_chunks(seed, n):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * hann_window(n)
    lhs = np.sum(np.abs(dft(x)) ** 2)
    rhs = n * np.sum(np.abs(x) ** 2)
    assert abs(lhs - rhs) / rhs < 1e-6


def _frame(rng, a, length):
    return rng.standard_normal((a, length, 2)).astype(np.float32)


def test_stft_zero_frame():
    assert not np.any(frame_to_stft(np.zeros((4, 64, 2), np.float32), 4, 16))


def test_stft_full_size_shape():
    frame = np.zeros((4, 65536, 2), np.float32)
    assert frame_to_stft(frame, 32, 2048).shape == (8, 32, 2048)


def test_stft_rejects_indivisible():
    with pytest.raises(ShapeError):
        frame_to_stft(np.zeros((1, 100, 2), np.float32), 3, 32)


def test_stft_tone_leaks_only_to_neighbours():
    f = 64
    m = np.arange(f)
    tone = np.exp(2j * np.pi * 5 * m / f)
    frame = np.stack([tone.real, tone.imag], axis=-1)[None].astype(np.float64)
    s = frame_to_stft(frame, 1, f)
    mag = np.hypot(s[0, 0], s[1, 0])
    # periodic Hann = 1/2 - 1/4 e^{+} - 1/4 e^{-}: peak F/2, neighbours F/4
    assert mag[5] == pytest.approx(f / 2, rel=1e-9)
    assert mag[4] == pytest.approx(f / 4, rel=1e-6)
    assert mag[6] == pytest.approx(f / 4, rel=1e-6)
    others = np.delete(mag, [4, 5, 6])
    assert np.all(others < 1e-6 * mag[5])


def test_stft_interleaved_layout():
    rng = np.random.default_rng(3)
    frame = _frame(rng, 3, 64)
    s = frame_to_stft(frame, 4, 16)
    z = frame[1, :, 0].astype(np.float64) + 1j * frame[1, :, 1]
    ref = direct_dft(z.reshape(4, 16) * hann_window(16))
    np.testing.assert_allclose(s[2], ref.real, atol=1e-9)
    np.testing.assert_allclose(s[3], ref.imag, atol=1e-9)


def test_stft_linear():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 128, 2))
    y = rng.standard_normal((2, 128, 2))
    lhs = frame_to_stft(1.5 * x - 0.25 * y, 4, 32)
    rhs = 1.5 * frame_to_stft(x, 4, 32) - 0.25 * frame_to_stft(y, 4, 32)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_standardize_hand_example():
    np.testing.assert_allclose(standardize([1.0, 3.0]), [-1.0, 1.0])


def test_standardize_fixed_point_and_stats():
    rng = np.random.default_rng(5)
    y = standardize(5 + 3 * rng.standard_normal((8, 4, 16)))
    assert abs(y.mean()) < 1e-5
    assert abs(y.var() - 1) < 1e-4
    np.testing.assert_allclose(standardize(y), y, atol=1e-6)


def test_standardize_constant_warns():
    with pytest.warns(DegenerateExampleWarning):
        out = standardize(np.full((2, 3), 7.0))
    assert not np.any(out)


def test_preprocess_frames_meets_invariant():
    rng = np.random.default_rng(6)
    frames = rng.standard_normal((3, 4, 256, 2)).astype(np.float32) * 10
    out = preprocess_frames(frames, 8)
    assert out.shape == (3, 8, 8, 32) and out.dtype == np.float32
    for ex in out.astype(np.float64):
        assert abs(ex.mean()) < 1e-5
        assert abs(ex.var() - 1) < 1e-4


def test_mask_antenna_zero():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 4, 16))
    m = mask_channels(x, 0)
    assert not np.any(m.input[:2])
    assert np.array_equal(m.input[2:], x[2:])
    assert m.target is x and m.masked_antenna == 0


def test_mask_idempotent_and_range():
    x = np.random.default_rng(8).standard_normal((8, 2, 4))
    once = mask_channels(x, 2).input
    assert np.array_equal(mask_channels(once, 2).input, once)
    with pytest.raises(ParameterError):
        mask_channels(x, 4)


def test_mask_batch_invariant_exhaustive():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((64, 8, 2, 4)).astype(np.float32)
    masked, target, ants = mask_batch(x, np.random.default_rng(10))
    assert target is x
    for i, k in enumerate(ants):
        for c in range(8):
            if c // 2 == k:
                assert np.all(masked[i, c] == 0.0)
            else:
                assert np.array_equal(masked[i, c], x[i, c])


def test_mask_sampler_uniform():
    x = np.zeros((10_000, 8, 1, 1), np.float32)
    _, _, ants = mask_batch(x, np.random.default_rng(11))
    counts = np.bincount(ants, minlength=4)
    assert np.all(np.abs(counts - 2500) <= 200)
    chi2 = np.sum((counts - 2500) ** 2 / 2500)
    assert chi2 < CHI2_3DOF_P01


def test_no_unexpected_warnings_on_normal_input():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        standardize(np.arange(10.0))
