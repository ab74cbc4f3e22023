"""Input coercion shared by the estimator wrappers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sfd.signal import DEFAULT_SAMPLE_RATE, AudioBuffer, read_wav


def as_buffer(x, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    if isinstance(x, AudioBuffer):
        buf = x
    elif isinstance(x, (str, Path)):
        buf = read_wav(x, sample_rate)
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim not in (1, 2) or arr.size == 0:
            raise ValueError(f"expected a 1-D or 2-D signal, got shape {arr.shape}")
        buf = AudioBuffer(arr, sample_rate)
    if buf.sample_rate != sample_rate:
        raise ValueError(f"sample rate {buf.sample_rate} Hz, expected {sample_rate} Hz")
    if not np.all(np.isfinite(buf.samples)):
        raise ValueError("signal contains NaN or inf")
    return buf


def _as_list(X) -> list:
    if isinstance(X, (AudioBuffer, str, Path)):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim <= 2:
        return [X]
    return list(X)


def check_stereo(X, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list:
    """List of 2-channel buffers from buffers, arrays ``(2, L)`` or WAV paths."""
    out = []
    for x in _as_list(X):
        buf = as_buffer(x, sample_rate)
        if buf.channel_count != 2:
            raise ValueError(f"expected stereo input, got {buf.channel_count} channels")
        out.append(buf)
    if not out:
        raise ValueError("no input signals")
    return out


def check_mono(X, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list:
    out = []
    for x in _as_list(X):
        buf = as_buffer(x, sample_rate)
        if buf.channel_count != 1:
            buf = AudioBuffer(buf.samples.mean(axis=0), sample_rate)
        out.append(buf)
    if not out:
        raise ValueError("no input signals")
    return out


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != n:
        raise ValueError(f"{n} signals but {y.size} labels")
    if np.any(np.isnan(y)) or np.any(np.abs(y) > 90.0):
        raise ValueError("DoA labels must lie in [-90, 90]")
    return y
