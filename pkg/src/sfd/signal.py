"""Time- and frequency-domain primitives.

Everything here is a pure function of its inputs. Arrays are float64 unless
stated otherwise; buffers store samples as ``(channels, length)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, get_window

from sfd.exceptions import AssetError

DEFAULT_SAMPLE_RATE = 16000

# Below this many output samples direct summation beats the FFT path.
_DIRECT_CONV_LIMIT = 4096


@dataclass(frozen=True)
class AudioBuffer:
    """Multi-channel PCM signal.

    ``samples`` is coerced to a 2-D float64 array of shape
    ``(channels, length)``; a 1-D input becomes a single channel.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError(
                f"samples must have shape (channels, length), got {samples.shape}"
            )
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]

    def power(self) -> float:
        """Mean squared amplitude over all samples and channels."""
        return float(np.mean(self.samples**2))

    def swap_channels(self) -> "AudioBuffer":
        return AudioBuffer(self.samples[::-1].copy(), self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 400
    hop_length: int = 160
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if min(self.window_length, self.hop_length, self.fft_size) <= 0:
            raise ValueError("STFT lengths must be positive")
        if self.window_length > self.fft_size:
            raise ValueError(
                f"window_length {self.window_length} exceeds fft_size {self.fft_size}"
            )
        if self.hop_length > self.window_length:
            raise ValueError(
                f"hop_length {self.hop_length} exceeds window_length {self.window_length}"
            )
        if self.window not in ("hann", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, length: int) -> int:
        if length < self.window_length:
            return 0
        return (length - self.window_length) // self.hop_length + 1

    def window_values(self) -> np.ndarray:
        if self.window == "rectangular":
            return np.ones(self.window_length)
        return get_window("hann", self.window_length, fftbins=True)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def dft(x) -> np.ndarray:
    """Forward DFT, ``X[k] = sum_t x[t] exp(-2j pi k t / L)``."""
    x = np.asarray(x, dtype=np.complex128)
    if x.size == 0:
        raise ValueError("dft of an empty sequence")
    return np.fft.fft(x)


def idft(X) -> np.ndarray:
    """Inverse of :func:`dft` (carries the 1/L factor)."""
    X = np.asarray(X, dtype=np.complex128)
    if X.size == 0:
        raise ValueError("idft of an empty sequence")
    return np.fft.ifft(X)


def stft(channel, config: StftConfig | None = None,
         sample_rate: int = DEFAULT_SAMPLE_RATE) -> ComplexSpectrogram:
    """One-sided STFT of a single real channel.

    Frame ``n`` covers samples ``[n*hop, n*hop + window_length)``; no centering
    or edge padding, so the frame count is
    ``floor((len - window_length) / hop) + 1``.
    """
    config = config or StftConfig()
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"stft expects a single channel, got shape {x.shape}")
    if x.shape[0] < config.window_length:
        raise ValueError(
            f"signal of {x.shape[0]} samples is shorter than the "
            f"{config.window_length}-sample window"
        )
    windows = np.lib.stride_tricks.sliding_window_view(x, config.window_length)
    windows = windows[:: config.hop_length] * config.window_values()
    frames = np.fft.rfft(windows, n=config.fft_size, axis=-1)
    return ComplexSpectrogram(frames, config, sample_rate)


def stft_buffer(buffer: AudioBuffer, config: StftConfig | None = None):
    """STFT of every channel of ``buffer``; returns a list of spectrograms."""
    return [stft(ch, config, buffer.sample_rate) for ch in buffer.samples]


def convolve(signal, ir, mode: str = "full") -> np.ndarray:
    """Linear convolution of two real sequences.

    ``mode="same"`` truncates the result to ``len(signal)`` samples starting at
    the first output sample (the response stays causal, tails are dropped).
    """
    signal = np.asarray(signal, dtype=np.float64)
    ir = np.asarray(ir, dtype=np.float64)
    if signal.size == 0 or ir.size == 0:
        raise ValueError("convolve requires non-empty inputs")
    if mode not in ("full", "same"):
        raise ValueError(f"unknown mode {mode!r}")
    if signal.size * ir.size <= _DIRECT_CONV_LIMIT * 16:
        out = np.convolve(signal, ir)
    else:
        out = fftconvolve(signal, ir)
    if mode == "same":
        out = out[: signal.size]
    return out


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """Return ``clean + g * noise`` with ``g`` chosen to hit ``snr_db``.

    Powers are averaged over all channels and the whole utterance. An infinite
    ``snr_db`` returns ``clean`` unchanged.
    """
    if clean.samples.shape != noise.samples.shape:
        raise ValueError(
            f"clean {clean.samples.shape} and noise {noise.samples.shape} differ in shape"
        )
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    if np.isposinf(snr_db):
        return clean
    if not np.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    p_clean = clean.power()
    p_noise = noise.power()
    if p_clean <= 0.0:
        raise ValueError("clean signal has zero power")
    if p_noise <= 0.0:
        raise ValueError("noise signal has zero power")
    gain = noise_gain(p_clean, p_noise, snr_db)
    return AudioBuffer(clean.samples + gain * noise.samples, clean.sample_rate)


def noise_gain(p_clean: float, p_noise: float, snr_db: float) -> float:
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def snr_db(clean: AudioBuffer, noise: AudioBuffer) -> float:
    return float(10.0 * np.log10(clean.power() / noise.power()))


def read_wav(path, expected_rate: int | None = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Read a PCM-16 or float-32 WAV file into an :class:`AudioBuffer`."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise AssetError(f"cannot read WAV {path}: {exc}", missing=[str(path)]) from exc
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(data.T if data.ndim == 2 else data, rate)


def write_wav(path, buffer: AudioBuffer, fmt: str = "float32") -> Path:
    """Write ``buffer`` as PCM-16 (``fmt="pcm16"``) or IEEE float-32."""
    path = Path(path)
    data = buffer.samples.T
    if buffer.channel_count == 1:
        data = data[:, 0]
    if fmt == "pcm16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = data.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(str(path), buffer.sample_rate, data)
    return path
