import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sfd.exceptions import AssetError
from sfd.signal import (
    AudioBuffer,
    StftConfig,
    convolve,
    dft,
    idft,
    mix_at_snr,
    noise_gain,
    read_wav,
    snr_db,
    stft,
    write_wav,
)


def brute_dft(x):
    n = len(x)
    t = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * t / n)) for k in range(n)])


def brute_convolve(x, h):
    out = np.zeros(len(x) + len(h) - 1)
    for i, xi in enumerate(x):
        for j, hj in enumerate(h):
            out[i + j] += xi * hj
    return out


class TestDft:
    def test_impulse_and_dc(self):
        np.testing.assert_allclose(dft([1, 0, 0, 0]), [1, 1, 1, 1])
        np.testing.assert_allclose(dft([1, 1, 1, 1]), [4, 0, 0, 0], atol=1e-12)

    def test_matches_direct_sum(self, rng):
        x = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        ref = brute_dft(x)
        assert np.max(np.abs(dft(x) - ref)) / np.max(np.abs(ref)) < 1e-10

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 64),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_round_trip_and_parseval(self, x):
        X = dft(x)
        scale = max(1.0, np.max(np.abs(x)))
        assert np.max(np.abs(idft(X) - x)) <= 1e-9 * scale
        energy = np.sum(np.abs(x) ** 2)
        assert abs(np.sum(np.abs(X) ** 2) / len(x) - energy) <= 1e-9 * max(energy, 1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            dft([])


class TestStft:
    def test_frame_count_and_shape(self):
        cfg = StftConfig()
        X = stft(np.zeros(16000), cfg)
        assert X.frames.shape == (cfg.n_frames(16000), 257) == (98, 257)
        assert not np.any(X.frames)

    def test_constant_rectangular(self):
        cfg = StftConfig(512, 256, 512, "rectangular")
        X = stft(np.ones(2048), cfg)
        np.testing.assert_allclose(X.frames[:, 0], 512)
        assert np.max(np.abs(X.frames[:, 1:])) < 1e-9

    def test_bin_centered_sinusoid(self):
        cfg = StftConfig(512, 160, 512, "rectangular")
        k = 37
        t = np.arange(4000)
        X = stft(np.cos(2 * np.pi * k * t / 512), cfg)
        assert np.all(np.argmax(np.abs(X.frames), axis=1) == k)

    def test_frames_match_windowed_direct_dft(self, rng):
        cfg = StftConfig()
        x = rng.standard_normal(1200)
        X = stft(x, cfg)
        w = cfg.window_values()
        for n in (0, 3, X.n_frames - 1):
            seg = np.zeros(512)
            seg[:400] = x[n * 160: n * 160 + 400] * w
            np.testing.assert_allclose(X.frames[n], brute_dft(seg)[:257], atol=1e-9)

    def test_periodic_hann(self):
        w = StftConfig().window_values()
        n = np.arange(400)
        np.testing.assert_allclose(w, 0.5 - 0.5 * np.cos(2 * np.pi * n / 400), atol=1e-15)

    def test_too_short(self):
        with pytest.raises(ValueError):
            stft(np.zeros(399))

    @pytest.mark.parametrize("kwargs", [dict(window_length=600), dict(hop_length=0),
                                        dict(window="kaiser")])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            StftConfig(**kwargs)


class TestConvolve:
    def test_identity_and_shift(self, rng):
        x = rng.standard_normal(20)
        np.testing.assert_allclose(convolve(x, [1.0]), x)
        shifted = convolve(x, [0, 0, 0, 1.0])
        np.testing.assert_allclose(shifted[3:], x)
        assert not np.any(shifted[:3])

    def test_direct_sum_oracle(self, rng):
        for _ in range(100):
            x = rng.standard_normal(rng.integers(1, 40))
            h = rng.standard_normal(rng.integers(1, 12))
            np.testing.assert_allclose(convolve(x, h), brute_convolve(x, h), atol=1e-10)

    def test_long_path_uses_fft_and_agrees(self, rng):
        x = rng.standard_normal(3000)
        h = rng.standard_normal(300)
        np.testing.assert_allclose(convolve(x, h), np.convolve(x, h), atol=1e-9)

    def test_same_mode(self, rng):
        x = rng.standard_normal(16)
        h = rng.standard_normal(5)
        np.testing.assert_allclose(convolve(x, h, "same"), brute_convolve(x, h)[:16], atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            convolve([], [1.0])
        with pytest.raises(ValueError):
            convolve([1.0], [1.0], mode="valid")


class TestMix:
    def test_gain_formula(self):
        assert noise_gain(1.0, 1.0, 20.0) == pytest.approx(0.1)

    @pytest.mark.parametrize("target", range(-20, 21, 5))
    def test_hits_requested_snr(self, rng, target):
        clean = AudioBuffer(rng.standard_normal((2, 8000)))
        noise = AudioBuffer(3.0 * rng.standard_normal((2, 8000)))
        mixed = mix_at_snr(clean, noise, target)
        residual = AudioBuffer(mixed.samples - clean.samples)
        assert abs(snr_db(clean, residual) - target) < 1e-9

    def test_zero_db_equal_power(self, rng):
        clean = AudioBuffer(rng.standard_normal(4000))
        noise = AudioBuffer(rng.standard_normal(4000) * 7)
        mixed = mix_at_snr(clean, noise, 0.0)
        assert np.mean((mixed.samples - clean.samples) ** 2) == pytest.approx(clean.power())

    def test_infinite_snr_is_clean(self, rng):
        clean = AudioBuffer(rng.standard_normal(100))
        assert mix_at_snr(clean, AudioBuffer(np.ones(100)), np.inf) is clean

    def test_zero_noise_rejected(self, rng):
        with pytest.raises(ValueError):
            mix_at_snr(AudioBuffer(rng.standard_normal(100)), AudioBuffer(np.zeros(100)), 10)


class TestBufferAndWav:
    def test_buffer_shape_rules(self):
        buf = AudioBuffer(np.zeros((3000, 2)).T)
        assert buf.channel_count == 2 and buf.length == 3000
        assert buf.duration == pytest.approx(3000 / 16000)
        with pytest.raises(ValueError):
            AudioBuffer(np.zeros((2, 2, 2)))

    @pytest.mark.parametrize("fmt,tol", [("float32", 1e-7), ("pcm16", 1 / 32768)])
    def test_round_trip(self, tmp_path, rng, fmt, tol):
        buf = AudioBuffer(np.clip(0.2 * rng.standard_normal((2, 500)), -0.9, 0.9))
        back = read_wav(write_wav(tmp_path / "a.wav", buf, fmt))
        assert back.channel_count == 2
        assert np.max(np.abs(back.samples - buf.samples)) <= tol

    def test_rate_mismatch(self, tmp_path):
        path = write_wav(tmp_path / "a.wav", AudioBuffer(np.zeros(10), 8000))
        with pytest.raises(ValueError):
            read_wav(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(AssetError):
            read_wav(tmp_path / "nope.wav")
