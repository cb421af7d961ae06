import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seldt.geometry import Doa, foa_steering_vector
from seldt.scene import AmbisonicClip, EventSpec, SceneSpec, SourceBank, render_scene
from seldt.spectral import (
    SpatialCovariance,
    band_bins,
    broadband_covariance,
    broadband_covariances,
    dump_covariances,
    frame_covariance_sums,
    stft,
)

FS = 24000


def single_source_clip(doa, seconds=1.0, cls=2):
    sc = SceneSpec(seconds, 1, 11, (-60, 60), (EventSpec(cls, 0.0, seconds, doa),), 0)
    return render_scene(sc, SourceBank(FS, 11))


def test_frame_count_30s():
    spec = stft(AmbisonicClip(FS, np.zeros((4, 30 * FS))), 960, 480)
    assert spec.frames == 1499
    assert spec.frame_rate_hz == 50.0
    assert spec.n_fft == 1024 and spec.bins == 513
    assert spec.bin_frequencies()[3] == pytest.approx(3 * FS / 1024)
    assert not np.any(spec.values)


def test_stft_argument_errors():
    clip = AmbisonicClip(FS, np.zeros((4, 500)))
    with pytest.raises(ValueError):
        stft(clip, 960, 480)  # shorter than one window
    clip = AmbisonicClip(FS, np.zeros((4, 5000)))
    with pytest.raises(ValueError):
        stft(clip, 960, 0)
    with pytest.raises(ValueError):
        stft(clip, 960, 480, n_fft=1000)
    with pytest.raises(ValueError):
        stft(clip, 960, 480, n_fft=512)


def test_sinusoid_at_bin_centre():
    n_fft = 1024
    k = 40
    t = np.arange(8 * n_fft)
    x = np.sin(2 * np.pi * k * t / n_fft)
    spec = stft(AmbisonicClip(FS, np.tile(x, (4, 1))), n_fft, n_fft // 2)
    p = np.abs(spec.values[:, :, 0]) ** 2
    frac = p / p.sum(axis=1, keepdims=True)
    # periodic Hann: 4 parts centre, 1 part each neighbour (closed form)
    np.testing.assert_allclose(frac[:, k], 2 / 3, atol=1e-9)
    assert np.all(frac[:, k - 1:k + 2].sum(axis=1) >= 0.90)


def test_parseval_full_band():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3 * FS))
    spec = stft(AmbisonicClip(FS, x), 960, 480)
    sums = frame_covariance_sums(spec, band=None)
    one_sided = np.real(np.trace(sums, axis1=1, axis2=2)).sum()
    v = spec.values
    dc_nyq = (np.abs(v[:, 0]) ** 2 + np.abs(v[:, -1]) ** 2).sum()
    two_sided = 2 * one_sided - dc_nyq
    win = np.hanning(961)[:-1]
    energy = 0.0
    for f in range(spec.frames):
        energy += np.sum((x[:, f * 480:f * 480 + 960] * win) ** 2)
    assert two_sided / spec.n_fft == pytest.approx(energy, rel=0.01)


@pytest.mark.parametrize("doa", [Doa(0, 0), Doa(40, 20), Doa(-130, -50)])
def test_single_plane_wave_rank_one(doa):
    spec = stft(single_source_clip(doa), 960, 480)
    cov = broadband_covariance(spec, 10)
    w, v = np.linalg.eigh(cov.matrix)
    assert w[-2] < 1e-9 * w[-1]
    a = foa_steering_vector(doa).as_array()
    cos = abs(np.vdot(v[:, -1], a)) / np.linalg.norm(a)
    assert cos >= 0.999


def test_white_channels_near_identity():
    rng = np.random.default_rng(1)
    spec = stft(AmbisonicClip(FS, 0.3 * rng.normal(size=(4, FS))), 960, 480)
    cov = broadband_covariance(spec, 20)
    assert cov.snapshot_count >= 1000
    m = cov.matrix / np.mean(np.real(np.diag(cov.matrix)))
    off = m - np.diag(np.diag(m))
    assert np.abs(off).max() < 0.05
    assert np.allclose(np.real(np.diag(m)), 1.0, atol=0.1)


def test_zero_spectrogram_zero_covariance():
    spec = stft(AmbisonicClip(FS, np.zeros((4, FS))), 960, 480)
    mats, counts = broadband_covariances(spec)
    assert not mats.any()
    assert broadband_covariance(spec, 0).snapshot_count == counts[0]


def test_silent_gap_is_exactly_zero():
    x = np.zeros((4, 2 * FS))
    x[:, :FS // 2] = np.random.default_rng(2).normal(size=(4, FS // 2)) * 1e3
    mats, _ = broadband_covariances(stft(AmbisonicClip(FS, x), 960, 480))
    assert not mats[60:].any()


def test_snapshot_counts_and_edges():
    spec = stft(AmbisonicClip(FS, np.ones((4, FS))), 960, 480)
    n_bins = len(band_bins(spec))
    # 50 Hz .. 8 kHz at 23.4375 Hz spacing -> bins 3..341
    assert n_bins == 339
    _, counts = broadband_covariances(spec)
    assert counts[0] == 2 * n_bins and counts[1] == 3 * n_bins and counts[-1] == 2 * n_bins


def test_batched_matches_single_frame():
    rng = np.random.default_rng(3)
    spec = stft(AmbisonicClip(FS, rng.normal(size=(4, FS // 2))), 960, 480)
    mats, counts = broadband_covariances(spec)
    for f in (0, 1, 12, spec.frames - 1):
        c = broadband_covariance(spec, f)
        np.testing.assert_allclose(mats[f], c.matrix, rtol=1e-10, atol=1e-12)
        assert counts[f] == c.snapshot_count
    with pytest.raises(IndexError):
        broadband_covariance(spec, spec.frames)


def test_empty_band_rejected():
    spec = stft(AmbisonicClip(FS, np.zeros((4, FS))), 960, 480)
    with pytest.raises(ValueError):
        broadband_covariances(spec, band=(30000, 40000))


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_covariances_hermitian_psd_and_scale(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, FS // 4)) * rng.uniform(0.1, 2, size=(4, 1))
    x[1] += 0.7 * x[0]
    mats, counts = broadband_covariances(stft(AmbisonicClip(FS, x), 960, 480))
    for m, n in zip(mats, counts):
        cov = SpatialCovariance(m, int(n))
        assert cov.is_hermitian() and cov.is_psd()
    scaled, _ = broadband_covariances(stft(AmbisonicClip(FS, c * x), 960, 480))
    np.testing.assert_allclose(scaled, c**2 * mats, rtol=1e-12, atol=0)
    exact, _ = broadband_covariances(stft(AmbisonicClip(FS, 4.0 * x), 960, 480))
    assert np.array_equal(exact, 16.0 * mats)


def test_dump_covariances(tmp_path):
    spec = stft(AmbisonicClip(FS, np.random.default_rng(0).normal(size=(4, 4800))), 960, 480)
    mats, counts = broadband_covariances(spec)
    dump_covariances(mats, counts, tmp_path / "c.json")
    rows = json.loads((tmp_path / "c.json").read_text())
    assert len(rows) == spec.frames
    back = np.array(rows[2]["real"]) + 1j * np.array(rows[2]["imag"])
    np.testing.assert_array_equal(back, mats[2])
