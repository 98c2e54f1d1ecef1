import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamkit.errors import BeamkitError
from beamkit.stft import (
    Spectrogram,
    StftConfig,
    istft,
    periodic_hann,
    read_wav,
    stft,
    write_wav,
)

from conftest import brute_dft


def test_default_config():
    cfg = StftConfig()
    assert (cfg.window_len, cfg.hop, cfg.sample_rate, cfg.n_bins) == (1024, 256, 16000, 513)


@pytest.mark.parametrize("kw", [dict(window_len=1000), dict(hop=300), dict(window_len=64, hop=32),
                                dict(window="hamming")])
def test_config_rejects_bad_pairs(kw):
    with pytest.raises(ValueError):
        StftConfig(**kw)


def test_frame_count_policy():
    cfg = StftConfig(window_len=64, hop=16)
    for n in (64, 65, 100, 1000):
        x = np.zeros(n)
        assert stft(x, cfg).n_frames == 1 + math.ceil(n / 16)
        assert cfg.n_frames(n) == 1 + math.ceil(n / 16)


def test_zero_input_gives_zero_spectrogram():
    spec = stft(np.zeros((3, 4096)))
    assert spec.data.shape == (3, 17, 513)
    assert not np.any(spec.data)


def test_errors():
    with pytest.raises(BeamkitError):
        stft(np.zeros((2, 0)))
    with pytest.raises(BeamkitError):
        stft([np.zeros(2048), np.zeros(2000)])
    with pytest.raises(BeamkitError):
        stft(np.zeros(100))
    bad = Spectrogram(np.full((1, 3, 513), np.nan + 0j))
    with pytest.raises(BeamkitError):
        istft(bad, 512)


def test_frames_match_brute_force_dft():
    cfg = StftConfig(window_len=64, hop=16)
    x = np.random.default_rng(1).standard_normal(300)
    spec = stft(x, cfg).data[0]
    padded = np.concatenate([np.zeros(32), x, np.zeros(200)])
    for t in (0, 3, 9):
        frame = padded[t * 16:t * 16 + 64] * periodic_hann(64)
        np.testing.assert_allclose(spec[t], brute_dft(frame), atol=1e-10)


def test_tone_energy_in_main_lobe():
    # A bin-centred tone is resolved by the Hann main lobe: bins k0-1..k0+1
    # hold all of the energy, with exactly 2/3 in k0 itself.
    cfg = StftConfig(window_len=128, hop=32)
    k0 = 10
    n = np.arange(2048)
    x = np.cos(2 * np.pi * k0 * n / 128)
    spec = stft(x, cfg).data[0]
    for t in range(6, spec.shape[0] - 6):
        e = np.abs(spec[t]) ** 2
        lobe = e[k0 - 1:k0 + 2].sum() / e.sum()
        assert lobe >= 0.99
        pad = np.concatenate([np.zeros(64), x, np.zeros(64 + 128)])
        oracle = np.abs(brute_dft(pad[t * 32:t * 32 + 128] * periodic_hann(128))) ** 2
        assert e[k0] / e.sum() == pytest.approx(oracle[k0] / oracle.sum(), abs=1e-9)
        assert e[k0] / e.sum() == pytest.approx(2 / 3, abs=1e-9)


def test_round_trip_white_noise():
    x = np.random.default_rng(7).standard_normal((4, 16000))
    y = istft(stft(x))
    assert y.shape == x.shape
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-6


def test_zero_spectrogram_gives_zero_signal():
    y = istft(Spectrogram(np.zeros((2, 10, 513), complex)), 2000)
    assert y.shape == (2, 2000) and not np.any(y)


def test_single_frame_impulse_inverse():
    cfg = StftConfig(window_len=64, hop=16)
    win = periodic_hann(64)
    imp = np.zeros(64)
    imp[20] = 1.0
    frame = win * imp
    spec = Spectrogram(np.fft.rfft(frame)[None, None, :], cfg)
    out = istft(spec, 32)[0]
    # inverse DFT oracle, synthesis window, then the one-frame OLA norm
    n, k = np.arange(64)[:, None], np.arange(64)[None, :]
    two_sided = np.concatenate([spec.data[0, 0], np.conj(spec.data[0, 0, -2:0:-1])])
    idft = np.real(np.exp(2j * np.pi * n * k / 64) @ two_sided) / 64
    oracle = np.zeros(64)
    nz = win ** 2 > 1e-10
    oracle[nz] = idft[nz] * win[nz] / win[nz] ** 2
    np.testing.assert_allclose(out, oracle[32:64], atol=1e-12)
    np.testing.assert_allclose(idft, frame, atol=1e-12)


def test_parseval_with_window_gain():
    cfg = StftConfig(window_len=64, hop=16)
    rng = np.random.default_rng(3)
    x = np.zeros(1024)
    x[64:-64] = rng.standard_normal(1024 - 128)
    spec = stft(x, cfg).data[0]
    two_sided = (np.sum(np.abs(spec[:, 1:-1]) ** 2) * 2
                 + np.sum(np.abs(spec[:, [0, -1]]) ** 2))
    expected = 64 * cfg.ola_gain * np.sum(x ** 2)
    assert two_sided == pytest.approx(expected, rel=1e-6)
    assert cfg.ola_gain == pytest.approx(np.sum(periodic_hann(64) ** 2) / 16)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(128, 1500), channels=st.integers(1, 3),
       wl=st.sampled_from([64, 128]), div=st.sampled_from([4, 8]),
       seed=st.integers(0, 2 ** 31 - 1))
def test_round_trip_property(n, channels, wl, div, seed):
    cfg = StftConfig(window_len=wl, hop=wl // div)
    x = np.random.default_rng(seed).uniform(-1, 1, (channels, n))
    spec = stft(x, cfg)
    assert spec.n_bins == wl // 2 + 1
    assert np.all(np.isfinite(spec.data))
    y = istft(spec)
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-6


@pytest.mark.parametrize("subtype,tol", [("float32", 1e-7), ("pcm16", 1 / 32768)])
def test_wav_round_trip(tmp_path, subtype, tol):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, (3, 800))
    path = tmp_path / "a.wav"
    write_wav(path, x, 16000, subtype)
    y, rate = read_wav(path, 16000)
    assert rate == 16000 and y.shape == x.shape
    assert np.max(np.abs(y - x)) <= tol


def test_wav_mono_and_rate_mismatch(tmp_path):
    path = tmp_path / "m.wav"
    write_wav(path, np.zeros(100), 8000)
    y, rate = read_wav(path)
    assert y.shape == (1, 100) and rate == 8000
    with pytest.raises(BeamkitError):
        read_wav(path, 16000)
