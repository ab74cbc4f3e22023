"""Binaural scene synthesis.

A scene is a mono source placed at an azimuth on the horizontal plane,
optionally reverberated by a room impulse response, rendered through a pair
of head-related impulse responses and mixed with a diffuse noise field.
Two versions are produced: the clean HRIR-only pair (distillation target
source) and the augmented pair (model input).

Azimuths follow the ``sfd.features`` sign convention: positive angles put
the source on the left (channel 0) side.
"""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sps

from sfd.exceptions import AssetError
from sfd.features import ArrayGeometry
from sfd.signal import (
    DEFAULT_SAMPLE_RATE,
    AudioBuffer,
    convolve,
    mix_at_snr,
    read_wav,
    write_wav,
)

log = logging.getLogger(__name__)

DEFAULT_SNR_GRID = tuple(range(-20, 21, 5))
BUILTIN_NOISE_TYPES = ("white", "pink", "babble", "speech_shaped")
ANALYTIC = "analytic"
NO_NOISE = "none"

_FRACTIONAL_DELAY_HALF_WIDTH = 16


def stable_seed(*parts) -> int:
    """Deterministic 32-bit seed from ints and strings (no ``hash()``)."""
    acc = 0
    for part in parts:
        acc = zlib.crc32(str(part).encode("utf-8"), acc)
    return acc


def child_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


@dataclass(frozen=True)
class SphericalHeadModel:
    head_radius: float = 0.0875
    speed_of_sound: float = 343.0
    shadow_db_at_90: float = 6.0

    def __post_init__(self):
        if min(self.head_radius, self.speed_of_sound, self.shadow_db_at_90) <= 0:
            raise ValueError("spherical head parameters must be positive")

    def itd(self, azimuth: float) -> float:
        """Woodworth ITD in seconds; positive for sources on the left."""
        theta = math.radians(azimuth)
        return self.head_radius / self.speed_of_sound * (theta + math.sin(theta))

    def equivalent_geometry(self, sample_rate: int = DEFAULT_SAMPLE_RATE) -> ArrayGeometry:
        """Free-field pair whose ``d*sin`` ITD best fits the Woodworth curve.

        Least squares over the frontal half plane gives ``d = a (1 + 4/pi)``.
        """
        distance = self.head_radius * (1.0 + 4.0 / math.pi)
        return ArrayGeometry(distance, self.speed_of_sound, sample_rate)


def _fractional_delay(delay: float, length: int) -> np.ndarray:
    n = np.arange(length) - delay
    taps = np.sinc(n)
    window = np.where(
        np.abs(n) <= _FRACTIONAL_DELAY_HALF_WIDTH,
        0.5 * (1.0 + np.cos(np.pi * n / _FRACTIONAL_DELAY_HALF_WIDTH)),
        0.0,
    )
    return taps * window


def analytic_hrir(azimuth: float, model: SphericalHeadModel | None = None,
                  sample_rate: int = DEFAULT_SAMPLE_RATE, length: int = 64):
    """Spherical-head ``(left, right)`` impulse responses.

    Both ears are delayed around ``length // 2`` samples; the ipsilateral ear
    leads by half the Woodworth ITD and the contralateral one lags by the
    other half and is attenuated by ``shadow_db_at_90 * |sin(azimuth)|``.
    """
    if not -90.0 <= azimuth <= 90.0:
        raise ValueError(f"azimuth {azimuth} outside [-90, 90]")
    model = model or SphericalHeadModel()
    half = 0.5 * abs(model.itd(azimuth)) * sample_rate
    if length < 2 * (half + _FRACTIONAL_DELAY_HALF_WIDTH) + 1:
        raise ValueError(f"HRIR length {length} too short for a {2 * half:.1f}-sample ITD")
    base = length // 2
    near = _fractional_delay(base - half, length)
    far = _fractional_delay(base + half, length)
    far *= 10.0 ** (-model.shadow_db_at_90 * abs(math.sin(math.radians(azimuth))) / 20.0)
    if azimuth >= 0:
        return near, far
    return far, near


@dataclass
class HrirSet:
    """Measured HRIR pairs on an azimuth grid (file-backed subjects)."""

    subject_id: str
    azimuth_grid: np.ndarray
    pairs: np.ndarray  # (n_azimuths, 2, taps)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    mic_distance: float = 0.18

    def __post_init__(self):
        self.azimuth_grid = np.asarray(self.azimuth_grid, dtype=np.float64)
        self.pairs = np.asarray(self.pairs, dtype=np.float64)
        if self.pairs.ndim != 3 or self.pairs.shape[:2] != (self.azimuth_grid.size, 2):
            raise ValueError("pairs must have shape (n_azimuths, 2, taps)")
        if np.any(np.diff(self.azimuth_grid) <= 0):
            raise ValueError("azimuth grid must be sorted and unique")

    def response(self, azimuth: float):
        idx = int(np.argmin(np.abs(self.azimuth_grid - azimuth)))
        left, right = self.pairs[idx]
        return left, right

    @classmethod
    def from_directory(cls, directory, sample_rate: int = DEFAULT_SAMPLE_RATE):
        """Load ``<directory>/<azimuth>.wav`` stereo files, e.g. ``-45.wav``."""
        directory = Path(directory)
        items = []
        for path in directory.glob("*.wav"):
            try:
                az = float(path.stem)
            except ValueError:
                continue
            buf = read_wav(path, sample_rate)
            if buf.channel_count != 2:
                raise AssetError(f"{path}: HRIR files must be stereo", missing=[str(path)])
            items.append((az, buf.samples))
        if not items:
            raise AssetError(f"no HRIR files in {directory}", missing=[str(directory)])
        items.sort(key=lambda item: item[0])
        taps = max(s.shape[1] for _, s in items)
        pairs = np.zeros((len(items), 2, taps))
        for i, (_, s) in enumerate(items):
            pairs[i, :, : s.shape[1]] = s
        return cls(directory.name, [az for az, _ in items], pairs, sample_rate)


@dataclass(frozen=True)
class SceneSpec:
    azimuth: float
    hrir_source: str = ANALYTIC
    rir_id: str | None = None
    noise_type: str = "white"
    snr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if not -90.0 <= self.azimuth <= 90.0:
            raise ValueError(f"azimuth {self.azimuth} outside [-90, 90]")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"invalid snr_db {self.snr_db}")

    @property
    def noisy(self) -> bool:
        return self.noise_type != NO_NOISE and math.isfinite(self.snr_db)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["snr_db"] = self.snr_db if math.isfinite(self.snr_db) else None
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        snr = data.get("snr_db")
        return cls(
            azimuth=float(data["azimuth"]),
            hrir_source=data.get("hrir_source", ANALYTIC),
            rir_id=data.get("rir_id"),
            noise_type=data.get("noise_type", "white"),
            snr_db=math.inf if snr is None else float(snr),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class RenderedScene:
    clean: AudioBuffer
    augmented: AudioBuffer
    spec: SceneSpec
    doa_label: float
    geometry: ArrayGeometry


@dataclass(frozen=True)
class SynthConfig:
    noise_types: tuple = BUILTIN_NOISE_TYPES
    rir_ids: tuple = (None,)
    hrir_subjects: tuple = (ANALYTIC,)
    snr_grid: tuple = DEFAULT_SNR_GRID
    azimuth_fixed: float | None = None


def sample_scene(rng: np.random.Generator, config: SynthConfig | None = None) -> SceneSpec:
    config = config or SynthConfig()
    for name in ("noise_types", "rir_ids", "hrir_subjects", "snr_grid"):
        if len(getattr(config, name)) == 0:
            raise ValueError(f"synth config has no {name}")
    azimuth = float(rng.uniform(-90.0, 90.0))
    if config.azimuth_fixed is not None:
        azimuth = float(config.azimuth_fixed)
    subject = config.hrir_subjects[rng.integers(len(config.hrir_subjects))]
    rir = config.rir_ids[rng.integers(len(config.rir_ids))]
    noise = config.noise_types[rng.integers(len(config.noise_types))]
    snr = float(config.snr_grid[rng.integers(len(config.snr_grid))])
    seed = int(rng.integers(2**31 - 1))
    return SceneSpec(azimuth, subject, rir, noise, snr, seed)


# --------------------------------------------------------------------------
# Source and noise material
# --------------------------------------------------------------------------

def _normalize(x: np.ndarray, rms: float) -> np.ndarray:
    level = np.sqrt(np.mean(x**2))
    return x if level == 0 else x * (rms / level)


def _shape_spectrum(white: np.ndarray, gain_fn, sample_rate: int) -> np.ndarray:
    """Circularly filter the last axis of ``white`` by a real gain curve."""
    m = white.shape[-1]
    freqs = sp_fft.rfftfreq(m, 1.0 / sample_rate)
    return sp_fft.irfft(sp_fft.rfft(white, axis=-1) * gain_fn(freqs), n=m, axis=-1)


def _speech_shape(freqs):
    # LTASS-like: rises to ~500 Hz, then rolls off ~9 dB/octave
    return (freqs / (freqs + 120.0)) / (1.0 + (freqs / 700.0) ** 1.5)


def _syllabic_envelope(n: int, rng, sample_rate: int, rate_hz: float = 4.0) -> np.ndarray:
    step = max(1, int(sample_rate / (2 * rate_hz)))
    knots = rng.uniform(0.0, 1.0, n // step + 3) ** 2
    env = np.interp(np.arange(n) / step, np.arange(knots.size), knots)
    return env


def synthetic_speech(duration: float, rng: np.random.Generator,
                     sample_rate: int = DEFAULT_SAMPLE_RATE, rms: float = 0.05) -> np.ndarray:
    """Speech-like mono signal: formant-shaped harmonic syllables and gaps."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * sample_rate)
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * sample_rate)
        end = min(n, pos + length)
        out[pos:end] = _syllable(length, rng, sample_rate)[: end - pos]
        pos = end + int(rng.uniform(0.02, 0.2) * sample_rate)
    if not np.any(out):
        out[: min(n, 1600)] = _syllable(min(n, 1600), rng, sample_rate)
    return _normalize(out, rms)


def _syllable(length: int, rng, sample_rate: int) -> np.ndarray:
    t = np.arange(length)
    envelope = np.sin(np.pi * (t + 0.5) / length) ** 2
    if rng.uniform() < 0.2:
        noise = rng.standard_normal(length)
        return envelope * np.diff(noise, prepend=0.0) * 0.5
    f0 = np.linspace(rng.uniform(90, 240), rng.uniform(90, 240), length)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = rng.uniform([250, 900, 2200], [800, 2000, 3200])
    mean_f0 = f0.mean()
    k = np.arange(1, int(4000 // mean_f0) + 1)
    fk = k * mean_f0
    amp = sum(1.0 / (1.0 + ((fk - f) / 120.0) ** 2) for f in formants) / k**0.5
    wave = np.sin(np.outer(phase, k) + rng.uniform(0, 2 * np.pi, k.size)) @ amp
    return envelope * wave


def noise_source(noise_type: str, length: int, rng: np.random.Generator,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Mono base noise of one of the built-in types."""
    # filter at an FFT-friendly length, then crop
    m = sp_fft.next_fast_len(length, real=True)
    if noise_type == "white":
        out = rng.standard_normal(length)
    elif noise_type == "pink":
        white = rng.standard_normal(m)
        out = _shape_spectrum(white, lambda f: 1.0 / np.sqrt(np.maximum(f, 20.0)),
                              sample_rate)[:length]
    elif noise_type == "speech_shaped":
        out = _shape_spectrum(rng.standard_normal(m), _speech_shape, sample_rate)[:length]
    elif noise_type == "babble":
        talkers = _shape_spectrum(rng.standard_normal((6, m)), _speech_shape,
                                  sample_rate)[:, :length]
        out = sum(_syllabic_envelope(length, rng, sample_rate, rng.uniform(3, 6)) * tk
                  for tk in talkers)
    else:
        raise AssetError(f"unknown noise type {noise_type!r}", missing=[noise_type])
    return _normalize(out, 1.0)


def diffuse_noise(duration: float, geometry: ArrayGeometry | None = None,
                  rng: np.random.Generator | None = None, base_noise=None,
                  sample_rate: int | None = None, nperseg: int = 512) -> AudioBuffer:
    """Two-channel noise with spherically isotropic inter-channel coherence.

    Two independent channels (white, or two excerpts of ``base_noise``) are
    mixed per STFT bin with the Cholesky factor of ``[[1, G], [G, 1]]`` where
    ``G(f) = sin(2 pi f d / c) / (2 pi f d / c)``, then overlap-added back.
    """
    geometry = geometry or ArrayGeometry()
    sample_rate = sample_rate or geometry.sample_rate
    rng = rng if rng is not None else np.random.default_rng()
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n = int(round(duration * sample_rate))
    if base_noise is None:
        first, second = rng.standard_normal((2, n))
    else:
        base = np.asarray(base_noise, dtype=np.float64)
        if base.size < 2 * n:
            base = np.tile(base, int(np.ceil(2 * n / base.size)))
        start = rng.integers(0, base.size - 2 * n + 1)
        first, second = base[start: start + n], base[start + n: start + 2 * n]
    _, _, z1 = sps.stft(first, fs=sample_rate, nperseg=nperseg, boundary="even")
    freqs, _, z2 = sps.stft(second, fs=sample_rate, nperseg=nperseg, boundary="even")
    coherence = np.sinc(2.0 * freqs * geometry.mic_distance / geometry.speed_of_sound)
    mixed = coherence[:, None] * z1 + np.sqrt(1.0 - coherence**2)[:, None] * z2
    _, left = sps.istft(z1, fs=sample_rate, nperseg=nperseg, boundary=True)
    _, right = sps.istft(mixed, fs=sample_rate, nperseg=nperseg, boundary=True)
    out = np.stack([_fit_length(left, n), _fit_length(right, n)])
    return AudioBuffer(out, sample_rate)


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.pad(x, (0, n - x.size))


def synthetic_rir(t60: float, rng: np.random.Generator,
                  sample_rate: int = DEFAULT_SAMPLE_RATE, direct_to_reverb_db: float = 3.0):
    """Exponentially decaying noise tail behind a unit direct-path impulse."""
    length = int(t60 * sample_rate)
    t = np.arange(length) / sample_rate
    tail = rng.standard_normal(length) * np.exp(-6.9078 * t / t60)
    tail[: int(0.0025 * sample_rate)] = 0.0
    energy = np.sum(tail**2)
    if energy > 0:
        tail *= np.sqrt(10.0 ** (-direct_to_reverb_db / 10.0) / energy)
    tail[0] = 1.0
    return tail


# --------------------------------------------------------------------------
# Assets
# --------------------------------------------------------------------------

@dataclass
class Assets:
    """Resolves HRIR subjects, RIR ids and noise material for rendering.

    ``noise_split`` selects which pool of noise clips is used so that test
    scenes never reuse training noise.
    """

    heads: dict = field(default_factory=lambda: {ANALYTIC: SphericalHeadModel()})
    hrir_sets: dict = field(default_factory=dict)
    rirs: dict = field(default_factory=dict)
    noise_clips: dict = field(default_factory=dict)
    noise_split: str = "train"
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @classmethod
    def builtin(cls, n_subjects: int = 10, n_rirs: int = 8, seed: int = 0,
                noise_split: str = "train", sample_rate: int = DEFAULT_SAMPLE_RATE):
        rng = np.random.default_rng(stable_seed("assets", seed))
        heads = {ANALYTIC: SphericalHeadModel()}
        for i in range(n_subjects):
            heads[f"head-{i:02d}"] = SphericalHeadModel(
                head_radius=float(rng.uniform(0.080, 0.095)),
                shadow_db_at_90=float(rng.uniform(4.0, 8.0)),
            )
        rirs = {}
        for i in range(n_rirs):
            t60 = float(rng.uniform(0.2, 0.6))
            rirs[f"rir-{i:02d}"] = synthetic_rir(t60, rng, sample_rate)
        return cls(heads=heads, rirs=rirs, noise_split=noise_split, sample_rate=sample_rate)

    @classmethod
    def from_directory(cls, root, sample_rate: int = DEFAULT_SAMPLE_RATE,
                       noise_split: str = "train"):
        """Load ``hrir/<subject>/<az>.wav``, ``rir/<id>.wav``, ``noise/<type>/<split>/*.wav``."""
        root = Path(root)
        assets = cls.builtin(noise_split=noise_split, sample_rate=sample_rate)
        for sub in sorted((root / "hrir").glob("*")) if (root / "hrir").is_dir() else []:
            if sub.is_dir():
                assets.hrir_sets[sub.name] = HrirSet.from_directory(sub, sample_rate)
        for path in sorted((root / "rir").glob("*.wav")) if (root / "rir").is_dir() else []:
            assets.rirs[path.stem] = read_wav(path, sample_rate).samples[0]
        noise_root = root / "noise"
        if noise_root.is_dir():
            for type_dir in sorted(p for p in noise_root.iterdir() if p.is_dir()):
                for split_dir in sorted(p for p in type_dir.iterdir() if p.is_dir()):
                    clips = [read_wav(p, sample_rate).samples[0]
                             for p in sorted(split_dir.glob("*.wav"))]
                    if clips:
                        assets.noise_clips[(type_dir.name, split_dir.name)] = clips
        return assets

    def with_split(self, noise_split: str) -> "Assets":
        return replace(self, noise_split=noise_split)

    def subjects(self, split: str | None = None) -> list:
        """Subject ids, partitioned 80:10:10 into train/val/test when asked."""
        ids = sorted(k for k in list(self.heads) + list(self.hrir_sets) if k != ANALYTIC)
        if split is None:
            return ids
        n = len(ids)
        n_train, n_val = int(round(0.8 * n)), int(round(0.1 * n))
        parts = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val],
                 "test": ids[n_train + n_val:]}
        if split not in parts:
            raise ValueError(f"unknown split {split!r}")
        return parts[split] or [ANALYTIC]

    def hrir(self, subject: str, azimuth: float):
        if subject in self.heads:
            return analytic_hrir(azimuth, self.heads[subject], self.sample_rate)
        if subject in self.hrir_sets:
            return self.hrir_sets[subject].response(azimuth)
        raise AssetError(f"unknown HRIR subject {subject!r}", missing=[subject])

    def geometry(self, subject: str) -> ArrayGeometry:
        if subject in self.heads:
            return self.heads[subject].equivalent_geometry(self.sample_rate)
        if subject in self.hrir_sets:
            return ArrayGeometry(self.hrir_sets[subject].mic_distance,
                                 sample_rate=self.sample_rate)
        raise AssetError(f"unknown HRIR subject {subject!r}", missing=[subject])

    def rir(self, rir_id: str | None):
        if rir_id is None or rir_id == "none":
            return None
        if rir_id not in self.rirs:
            raise AssetError(f"unknown RIR id {rir_id!r}", missing=[rir_id])
        return self.rirs[rir_id]

    def base_noise(self, noise_type: str, length: int, seed: int) -> np.ndarray:
        rng = child_rng("noise", noise_type, self.noise_split, seed)
        clips = self.noise_clips.get((noise_type, self.noise_split))
        if clips:
            return np.asarray(clips[rng.integers(len(clips))], dtype=np.float64)
        return noise_source(noise_type, length, rng, self.sample_rate)

    def missing(self, specs) -> list:
        """Asset ids referenced by ``specs`` that cannot be resolved."""
        missing = set()
        for spec in specs:
            if spec.hrir_source not in self.heads and spec.hrir_source not in self.hrir_sets:
                missing.add(spec.hrir_source)
            if spec.rir_id not in (None, "none") and spec.rir_id not in self.rirs:
                missing.add(spec.rir_id)
            if (spec.noise_type not in BUILTIN_NOISE_TYPES + (NO_NOISE,)
                    and (spec.noise_type, self.noise_split) not in self.noise_clips):
                missing.add(spec.noise_type)
        return sorted(missing)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _binauralize(mono: np.ndarray, left: np.ndarray, right: np.ndarray, length: int):
    onset = int(min(np.argmax(np.abs(left)), np.argmax(np.abs(right))))
    chans = [convolve(mono, h)[onset: onset + length] for h in (left, right)]
    return np.stack([_fit_length(c, length) for c in chans])


def render(spec: SceneSpec, source: AudioBuffer, assets: Assets | None = None) -> RenderedScene:
    """Render the clean (HRIR only) and augmented (RIR + HRIR + noise) pair.

    Both outputs have the source's length and are aligned on the direct path.
    """
    assets = assets or Assets()
    if source.channel_count != 1:
        raise ValueError(f"source must be mono, got {source.channel_count} channels")
    if source.sample_rate != assets.sample_rate:
        raise ValueError(
            f"source rate {source.sample_rate} Hz differs from assets {assets.sample_rate} Hz")
    mono = source.samples[0]
    n = mono.size
    left, right = assets.hrir(spec.hrir_source, spec.azimuth)
    geometry = assets.geometry(spec.hrir_source)
    clean = AudioBuffer(_binauralize(mono, left, right, n), source.sample_rate)
    rir = assets.rir(spec.rir_id)
    if rir is None:
        reverberant = clean
    else:
        wet = convolve(mono, rir, mode="same")
        reverberant = AudioBuffer(_binauralize(wet, left, right, n), source.sample_rate)
    augmented = reverberant
    if spec.noisy:
        base = assets.base_noise(spec.noise_type, 2 * n, spec.seed)
        noise = diffuse_noise(n / source.sample_rate, geometry,
                              child_rng("diffuse", spec.seed), base, source.sample_rate)
        augmented = mix_at_snr(reverberant, noise, spec.snr_db)
    return RenderedScene(clean, augmented, spec, float(spec.azimuth), geometry)


def add_diffuse_noise(buffer: AudioBuffer, noise_type: str, snr_db: float, seed: int,
                      assets: Assets, geometry: ArrayGeometry) -> AudioBuffer:
    """Online augmentation of an already-rendered stereo buffer."""
    if noise_type == NO_NOISE or not math.isfinite(snr_db):
        return buffer
    n = buffer.length
    base = assets.base_noise(noise_type, 2 * n, seed)
    noise = diffuse_noise(n / buffer.sample_rate, geometry, child_rng("diffuse", seed),
                          base, buffer.sample_rate)
    return mix_at_snr(buffer, noise, snr_db)


@dataclass
class ManifestEntry:
    source: str
    spec: SceneSpec
    id: str = ""
    clean: str | None = None
    augmented: str | None = None
    status: str = "ok"
    error: str | None = None
    geometry: dict | None = None
    duration: float | None = None


def read_manifest(path) -> list:
    """Parse a JSON-lines dataset manifest into :class:`ManifestEntry` records."""
    path = Path(path)
    entries = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            base = path.parent
            entries.append(ManifestEntry(
                source=_resolve(base, row.get("source")),
                spec=SceneSpec.from_dict(row["spec"]),
                id=row.get("id", ""),
                clean=_resolve(base, row.get("clean")),
                augmented=_resolve(base, row.get("augmented")),
                status=row.get("status", "ok"),
                error=row.get("error"),
                geometry=row.get("geometry"),
                duration=row.get("duration"),
            ))
    return entries


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _render_one(index: int, source, spec: SceneSpec, out_dir: Path, assets: Assets,
                wav_format: str) -> dict:
    uid = f"utt_{index:05d}"
    source_ref = os.path.relpath(source, out_dir)
    row = {"id": uid, "source": source_ref, "spec": spec.to_dict(), "status": "ok"}
    try:
        buf = read_wav(source, assets.sample_rate)
        if buf.channel_count != 1:
            buf = AudioBuffer(buf.samples.mean(axis=0), buf.sample_rate)
        scene = render(spec, buf, assets)
        clean_path = write_wav(out_dir / f"{uid}_clean.wav", scene.clean, wav_format)
        aug_path = write_wav(out_dir / f"{uid}_aug.wav", scene.augmented, wav_format)
        geometry = asdict(scene.geometry)
        meta = {
            "id": uid,
            "azimuth": spec.azimuth,
            "doa_label": scene.doa_label,
            "geometry": geometry,
            "snr_db": spec.to_dict()["snr_db"],
            "noise_type": spec.noise_type,
            "rir_id": spec.rir_id,
            "subject": spec.hrir_source,
            "seed": spec.seed,
            "source": source_ref,
            "duration": buf.duration,
        }
        (out_dir / f"{uid}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        row.update(clean=clean_path.name, augmented=aug_path.name, geometry=geometry,
                   metadata=f"{uid}.json", duration=buf.duration)
    except Exception as exc:  # per-file failures are recorded, not raised
        log.warning("rendering %s failed: %s", uid, exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def render_dataset(manifest, out_dir, assets: Assets | None = None, jobs: int = 1,
                   wav_format: str = "float32") -> Path:
    """Render ``(source_path, SceneSpec)`` pairs to WAV + JSON under ``out_dir``.

    Returns the path of the JSON-lines manifest indexing every utterance.
    """
    assets = assets or Assets()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = list(manifest)

    def work(args):
        i, (source, spec) = args
        return _render_one(i, source, spec, out_dir, assets, wav_format)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(work, enumerate(items)))
    else:
        rows = [work(item) for item in enumerate(items)]
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path
