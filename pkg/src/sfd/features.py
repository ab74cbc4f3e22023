"""Binaural spatial features and the classic GCC-PHAT localizer.

Channel 0 is the left ear / first microphone ``m1`` and channel 1 the right
ear ``m2``. A positive lag, ITD or DoA means ``m2`` receives the wavefront
after ``m1``, i.e. the source sits on the ``m1`` side.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sfd.signal import (
    DEFAULT_SAMPLE_RATE,
    AudioBuffer,
    ComplexSpectrogram,
    StftConfig,
    stft,
)

PHAT_EPSILON = 1e-8
ILD_EPSILON = 1e-8


class FeatureKind(str, enum.Enum):
    GCC = "gcc"
    GCC_PHAT = "gcc-phat"
    CPS_PHASE = "cps-phase"
    ILD_IPD = "ild-ipd"
    STFT_RI = "stft-ri"

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key or kind.name.lower().replace("_", "-") == key:
                return kind
        raise ValueError(f"unknown feature kind {value!r}")


_KIND_CODES = {kind: i for i, kind in enumerate(FeatureKind)}


@dataclass(frozen=True)
class ArrayGeometry:
    mic_distance: float = 0.18
    speed_of_sound: float = 343.0
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not self.mic_distance > 0 or not self.speed_of_sound > 0:
            raise ValueError("mic_distance and speed_of_sound must be positive")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    @property
    def max_delay_samples(self) -> int:
        """Largest physically possible inter-channel lag, rounded up."""
        return math.ceil(self.mic_distance * self.sample_rate / self.speed_of_sound)

    def default_max_lag(self) -> int:
        return self.max_delay_samples + 5


@dataclass(frozen=True)
class CpsSeq:
    frames: np.ndarray
    config: StftConfig
    sample_rate: int = DEFAULT_SAMPLE_RATE


@dataclass(frozen=True)
class GccSeq:
    frames: np.ndarray
    max_lag: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.max_lag, self.max_lag + 1)


@dataclass(frozen=True)
class SpatialFeatureSeq:
    frames: np.ndarray
    kind: FeatureKind


def _check_pair(X1: ComplexSpectrogram, X2: ComplexSpectrogram):
    if X1.frames.shape != X2.frames.shape:
        raise ValueError(f"spectrogram shapes differ: {X1.frames.shape} vs {X2.frames.shape}")
    if X1.config != X2.config:
        raise ValueError("spectrograms were computed with different STFT configs")


def cross_power_spectrum(X1: ComplexSpectrogram, X2: ComplexSpectrogram) -> CpsSeq:
    _check_pair(X1, X2)
    return CpsSeq(X1.frames * np.conj(X2.frames), X1.config, X1.sample_rate)


def phat_weight(cps: CpsSeq, epsilon: float = PHAT_EPSILON) -> CpsSeq:
    frames = cps.frames / (np.abs(cps.frames) + epsilon)
    return CpsSeq(frames, cps.config, cps.sample_rate)


def ipd(cps: CpsSeq) -> np.ndarray:
    # np.angle(0) == 0 and np.angle(-1+0j) == pi, matching the (-pi, pi] range
    return np.angle(cps.frames)


def ild(X1: ComplexSpectrogram, X2: ComplexSpectrogram,
        epsilon: float = ILD_EPSILON) -> np.ndarray:
    _check_pair(X1, X2)
    return 20.0 * np.log10((np.abs(X1.frames) + epsilon) / (np.abs(X2.frames) + epsilon))


def gcc(cps: CpsSeq, weighting: str = "none", max_lag: int | None = None,
        epsilon: float = PHAT_EPSILON) -> GccSeq:
    """Generalized cross-correlation truncated to ``[-max_lag, max_lag]``.

    Column ``max_lag`` of the result is lag zero. The two-sided spectrum is
    rebuilt from the one-sided CPS by conjugate symmetry.
    """
    fft_size = cps.config.fft_size
    if max_lag is None:
        max_lag = fft_size // 2
    if not 0 <= max_lag <= fft_size // 2:
        raise ValueError(f"max_lag {max_lag} outside [0, {fft_size // 2}]")
    if weighting == "phat":
        cps = phat_weight(cps, epsilon)
    elif weighting != "none":
        raise ValueError(f"unknown weighting {weighting!r}")
    # conj flips the lag axis so that a delayed m2 peaks at a positive lag
    corr = np.fft.irfft(np.conj(cps.frames), n=fft_size, axis=-1)
    lags = np.arange(-max_lag, max_lag + 1)
    return GccSeq(corr[:, lags % fft_size], max_lag, cps.sample_rate)


def _lag_priority(max_lag: int) -> np.ndarray:
    """Column order 0, -1, +1, -2, +2, ... used to break argmax ties."""
    order = [0]
    for k in range(1, max_lag + 1):
        order.extend((-k, k))
    return np.asarray(order) + max_lag


def best_lag(frames: np.ndarray, max_lag: int) -> np.ndarray:
    frames = np.atleast_2d(frames)
    order = _lag_priority(max_lag)
    picked = np.argmax(frames[:, order], axis=1)
    return order[picked] - max_lag


def itd_from_gcc_argmax(gcc_seq: GccSeq) -> np.ndarray:
    return best_lag(gcc_seq.frames, gcc_seq.max_lag) / gcc_seq.sample_rate


def bin_frequencies(config: StftConfig, sample_rate: int) -> np.ndarray:
    """Angular frequency (rad/s) of every one-sided bin."""
    return 2.0 * np.pi * np.arange(config.n_bins) * sample_rate / config.fft_size


def itd_from_ipd(ipd_frame, config: StftConfig | None = None,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    config = config or StftConfig()
    ipd_frame = np.asarray(ipd_frame, dtype=np.float64)
    omega = bin_frequencies(config, sample_rate)
    out = np.zeros(np.broadcast_shapes(ipd_frame.shape, omega.shape))
    np.divide(ipd_frame, omega, out=out, where=omega > 0)
    return out


def doa_from_itd(itd, geometry: ArrayGeometry | None = None):
    """Broadside angle in degrees; ITDs beyond the array aperture clamp to +-90."""
    geometry = geometry or ArrayGeometry()
    ratio = np.clip(geometry.speed_of_sound * np.asarray(itd, dtype=np.float64)
                    / geometry.mic_distance, -1.0, 1.0)
    doa = np.degrees(np.arcsin(ratio))
    return float(doa) if doa.ndim == 0 else doa


def feature_dim(kind, config: StftConfig | None = None, max_lag: int = 14) -> int:
    kind = FeatureKind.parse(kind)
    config = config or StftConfig()
    if kind in (FeatureKind.GCC, FeatureKind.GCC_PHAT):
        return 2 * max_lag + 1
    if kind in (FeatureKind.CPS_PHASE, FeatureKind.ILD_IPD):
        return 2 * config.n_bins
    return 4 * config.n_bins


def extract_features(X1: ComplexSpectrogram, X2: ComplexSpectrogram, kind,
                     max_lag: int = 14, epsilon: float = PHAT_EPSILON) -> SpatialFeatureSeq:
    """Per-frame feature vectors of the requested kind.

    Layouts: GCC/GCC-PHAT lags ``-max_lag..max_lag``; CPS-phase
    ``[Re, Im]`` of the PHAT-normalized CPS; ILD-IPD ``[ILD, IPD]``;
    STFT-RI ``[Re X1, Im X1, Re X2, Im X2]``.
    """
    kind = FeatureKind.parse(kind)
    _check_pair(X1, X2)
    if kind is FeatureKind.STFT_RI:
        frames = np.concatenate(
            [X1.frames.real, X1.frames.imag, X2.frames.real, X2.frames.imag], axis=1
        )
        return SpatialFeatureSeq(frames, kind)
    cps = cross_power_spectrum(X1, X2)
    if kind is FeatureKind.GCC:
        frames = gcc(cps, "none", max_lag).frames
    elif kind is FeatureKind.GCC_PHAT:
        frames = gcc(cps, "phat", max_lag, epsilon).frames
    elif kind is FeatureKind.CPS_PHASE:
        unit = phat_weight(cps, epsilon).frames
        frames = np.concatenate([unit.real, unit.imag], axis=1)
    else:
        frames = np.concatenate([ild(X1, X2, epsilon), ipd(cps)], axis=1)
    return SpatialFeatureSeq(frames, kind)


def buffer_features(buffer: AudioBuffer, kind, config: StftConfig | None = None,
                    max_lag: int = 14, epsilon: float = PHAT_EPSILON) -> np.ndarray:
    """Convenience: STFT both channels of a stereo buffer and extract features."""
    if buffer.channel_count != 2:
        raise ValueError(f"expected a stereo buffer, got {buffer.channel_count} channels")
    config = config or StftConfig()
    X1 = stft(buffer.samples[0], config, buffer.sample_rate)
    X2 = stft(buffer.samples[1], config, buffer.sample_rate)
    return extract_features(X1, X2, kind, max_lag, epsilon).frames


def causal_average(frames: np.ndarray, window: int) -> np.ndarray:
    """Mean over the trailing ``window`` rows (fewer at the start)."""
    if window < 1:
        raise ValueError("pool window must be >= 1")
    csum = np.cumsum(frames, axis=0)
    out = csum.copy()
    out[window:] = csum[window:] - csum[:-window]
    counts = np.minimum(np.arange(1, frames.shape[0] + 1), window)
    return out / counts[:, np.newaxis]


def classic_doa_estimate(buffer: AudioBuffer, stft_config: StftConfig | None = None,
                         geometry: ArrayGeometry | None = None, pool_window: int = 100,
                         max_lag: int | None = None) -> np.ndarray:
    """GCC-PHAT, trailing average pooling, argmax, then ITD to DoA per frame."""
    if buffer.channel_count != 2:
        raise ValueError(f"classic DoA needs stereo input, got {buffer.channel_count} channels")
    stft_config = stft_config or StftConfig()
    geometry = geometry or ArrayGeometry(sample_rate=buffer.sample_rate)
    if max_lag is None:
        max_lag = min(geometry.max_delay_samples, stft_config.fft_size // 2)
    X1 = stft(buffer.samples[0], stft_config, buffer.sample_rate)
    X2 = stft(buffer.samples[1], stft_config, buffer.sample_rate)
    seq = gcc(cross_power_spectrum(X1, X2), "phat", max_lag)
    pooled = GccSeq(causal_average(seq.frames, pool_window), max_lag, buffer.sample_rate)
    return doa_from_itd(itd_from_gcc_argmax(pooled), geometry)


# Feature cache: 40-byte little-endian header followed by N*D float32 values.
_CACHE_MAGIC = b"SFDF"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHIIIIIHHiI")
_WINDOW_CODES = {"hann": 0, "rectangular": 1}


def write_feature_cache(path, seq: SpatialFeatureSeq, config: StftConfig,
                        sample_rate: int = DEFAULT_SAMPLE_RATE,
                        max_lag: int | None = None) -> Path:
    path = Path(path)
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    n, d = frames.shape
    header = _CACHE_HEADER.pack(
        _CACHE_MAGIC, _CACHE_VERSION, _KIND_CODES[seq.kind], n, d,
        config.window_length, config.hop_length, config.fft_size,
        _WINDOW_CODES[config.window], 0,
        -1 if max_lag is None else int(max_lag), int(sample_rate),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.tobytes())
    return path


def read_feature_cache(path):
    """Return ``(SpatialFeatureSeq, StftConfig, sample_rate, max_lag)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise ValueError(f"{path}: truncated feature cache")
    (magic, version, kind_code, n, d, win, hop, nfft, window_code, _reserved,
     max_lag, rate) = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    expected = _CACHE_HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size).reshape(n, d)
    kind = list(FeatureKind)[kind_code]
    window = {v: k for k, v in _WINDOW_CODES.items()}[window_code]
    config = StftConfig(win, hop, nfft, window)
    return SpatialFeatureSeq(frames.astype(np.float32), kind), config, rate, (
        None if max_lag < 0 else max_lag)
