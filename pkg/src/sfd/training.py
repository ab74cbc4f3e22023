"""Spatial feature distillation pretraining and DoA fine-tuning loops."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from sfd.exceptions import ConfigError, NumericalError
from sfd.features import FeatureKind, buffer_features, feature_dim
from sfd.nn import (
    AdamW,
    Checkpoint,
    ConformerConfig,
    DoAModel,
    LrSchedule,
    SFDModel,
    cross_entropy_loss,
    lr_at,
    mse_loss,
)
from sfd.scene import (
    BUILTIN_NOISE_TYPES,
    DEFAULT_SNR_GRID,
    Assets,
    SynthConfig,
    add_diffuse_noise,
    child_rng,
    read_manifest,
    render,
    sample_scene,
    synthetic_speech,
)
from sfd.signal import DEFAULT_SAMPLE_RATE, AudioBuffer, StftConfig, read_wav
from sfd.features import ArrayGeometry

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 5.0


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class EncoderSettings:
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    conv_kernel: int = 31
    ff_expansion: int = 4
    stem_dim: int = 256
    dropout: float = 0.0

    def build(self, input_dim: int) -> ConformerConfig:
        return ConformerConfig(input_dim=input_dim, **dataclasses.asdict(self))


@dataclass
class OptimSettings:
    lr_max: float = 1e-3
    lr_min: float = 5e-7
    warmup_steps: int = 3000
    cycle_steps: int = 30000
    cycle_length_scale: float = 0.9
    lr_max_scale: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float = GRAD_CLIP_NORM

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_max, self.lr_min, self.warmup_steps, self.cycle_steps,
                          self.cycle_length_scale, self.lr_max_scale)


@dataclass
class PretrainConfig:
    """Distillation pretraining settings.

    A full-scale run uses 50k steps with 10-minute buckets and a 3k/30k
    warm-up/cycle schedule; the defaults here are scaled for a CPU run.
    """

    target_kind: str = "cps-phase"
    steps: int = 500
    bucket_minutes: float = 0.25
    max_lag: int = 14
    epsilon: float = 1e-8
    snr_grid: tuple = DEFAULT_SNR_GRID
    noise_types: tuple = BUILTIN_NOISE_TYPES
    use_rirs: bool = True
    validation_every: int = 250
    validation_size: int = 16
    normalize_targets: bool = False
    seed: int = 0
    prefetch: bool = False
    stft: StftConfig = field(default_factory=StftConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    optim: OptimSettings = field(
        default_factory=lambda: OptimSettings(warmup_steps=100, cycle_steps=2000))

    def __post_init__(self):
        kind = FeatureKind.parse(self.target_kind)
        if kind is FeatureKind.STFT_RI:
            raise ConfigError("STFT-RI is the model input, not a distillation target")
        self.target_kind = kind.value
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")


@dataclass
class FinetuneConfig:
    init: str = "random"
    input_kind: str = "stft-ri"
    input_max_lag: int = 256
    steps: int = 1000
    batch_size: int = 8
    resolution: float = 5.0
    snr_grid: tuple = DEFAULT_SNR_GRID
    noise_types: tuple = BUILTIN_NOISE_TYPES
    augment: bool = True
    freeze_encoder: bool = False
    validation_every: int = 250
    validation_fraction: float = 0.1
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    optim: OptimSettings = field(
        default_factory=lambda: OptimSettings(warmup_steps=10, cycle_steps=1000))

    def __post_init__(self):
        self.input_kind = FeatureKind.parse(self.input_kind).value
        n_classes(self.resolution)


def config_to_dict(config) -> dict:
    out = dataclasses.asdict(config)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def config_from_dict(cls, data: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"unknown {cls.__name__} field {key!r}")
        if key == "stft":
            value = StftConfig(**value)
        elif key == "encoder":
            value = EncoderSettings(**value)
        elif key == "optim":
            value = OptimSettings(**value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


# --------------------------------------------------------------------------
# Labels and batching
# --------------------------------------------------------------------------

def n_classes(resolution: float = 5.0) -> int:
    count = 180.0 / resolution
    if resolution <= 0 or abs(count - round(count)) > 1e-9:
        raise ConfigError(f"resolution {resolution} does not divide 180 degrees")
    return int(round(count)) + 1


def quantize_doa(angle, resolution: float = 5.0):
    """Class index nearest to ``angle``; half-way ties round toward the higher index."""
    a = np.asarray(angle, dtype=np.float64)
    if np.any(a < -90.0) or np.any(a > 90.0) or np.any(np.isnan(a)):
        raise ValueError("DoA angles must lie in [-90, 90]")
    idx = np.floor((a + 90.0) / resolution + 0.5).astype(np.int64)
    idx = np.minimum(idx, n_classes(resolution) - 1)
    return int(idx) if idx.ndim == 0 else idx


def dequantize_doa(index, resolution: float = 5.0):
    k = n_classes(resolution)
    i = np.asarray(index)
    if np.any(i < 0) or np.any(i >= k):
        raise ValueError(f"class index outside [0, {k})")
    deg = i * resolution - 90.0
    return float(deg) if np.ndim(deg) == 0 else deg


def bucket_batch(durations, bucket_minutes: float, rng: np.random.Generator):
    """Yield index lists grouping utterances of similar duration.

    Each bucket's summed duration stays within ``bucket_minutes``; an utterance
    longer than the bucket forms a batch of its own.
    """
    durations = np.asarray(durations, dtype=np.float64)
    if durations.size == 0:
        return iter(())
    capacity = bucket_minutes * 60.0
    jitter = rng.permutation(durations.size)
    order = np.lexsort((jitter, durations))
    buckets, current, total = [], [], 0.0
    for idx in order:
        d = durations[idx]
        if current and total + d > capacity:
            buckets.append(current)
            current, total = [], 0.0
        if d > capacity:
            log.warning("utterance %d (%.1f s) exceeds the bucket size", idx, d)
        current.append(int(idx))
        total += d
    if current:
        buckets.append(current)
    return iter([buckets[i] for i in rng.permutation(len(buckets))])


def padded_frames(batches, lengths) -> int:
    """Count of zero-padded frames when each batch pads to its longest item."""
    lengths = np.asarray(lengths)
    return int(sum(len(b) * lengths[b].max() - lengths[b].sum() for b in batches if len(b)))


@dataclass
class Batch:
    inputs: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def collate(cls, inputs, targets, dtype=torch.float32) -> "Batch":
        n = max(x.shape[0] for x in inputs)
        b = len(inputs)
        x = torch.zeros(b, n, inputs[0].shape[1], dtype=dtype)
        if targets[0].ndim == 2:
            z = torch.zeros(b, n, targets[0].shape[1], dtype=dtype)
        else:
            z = torch.zeros(b, n, dtype=torch.long)
        mask = torch.zeros(b, n, dtype=dtype)
        for i, (xi, zi) in enumerate(zip(inputs, targets)):
            m = xi.shape[0]
            x[i, :m] = torch.from_numpy(np.asarray(xi, dtype=np.float32)).to(dtype)
            z[i, :m] = torch.as_tensor(zi).to(z.dtype)
            mask[i, :m] = 1.0
        return cls(x, z, mask)


def _prefetching(make, count: int, enabled: bool, depth: int = 4):
    """Yield ``make(i)`` for ``i < count``, optionally from a producer thread."""
    if not enabled:
        for i in range(count):
            yield make(i)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)

    def producer():
        for i in range(count):
            try:
                q.put(("ok", make(i)))
            except Exception as exc:  # surfaced in the consumer
                q.put(("error", exc))
                return

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    for _ in range(count):
        status, item = q.get()
        if status == "error":
            raise item
        yield item


def _global_grad_norm(model) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _diagnostics(model, step, lr, loss) -> dict:
    norms = {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
    return {"step": step, "lr": lr, "loss": loss.item(), "grad_norms": dict(worst[:10])}


# --------------------------------------------------------------------------
# Corpora
# --------------------------------------------------------------------------

def synthetic_corpus(minutes: float, seed: int = 0, min_seconds: float = 1.0,
                     max_seconds: float = 2.0,
                     sample_rate: int = DEFAULT_SAMPLE_RATE) -> list:
    """Mono speech-like utterances totalling roughly ``minutes`` of audio."""
    rng = child_rng("corpus", seed)
    out, total = [], 0.0
    while total < minutes * 60.0:
        dur = float(rng.uniform(min_seconds, max_seconds))
        x = synthetic_speech(dur, rng, sample_rate).astype(np.float32)
        out.append(AudioBuffer(x, sample_rate))
        total += dur
    return out


def load_corpus(paths, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list:
    out = []
    for path in paths:
        buf = read_wav(path, sample_rate)
        if buf.channel_count != 1:
            buf = AudioBuffer(buf.samples.mean(axis=0), sample_rate)
        out.append(buf)
    return out


def _split_holdout(items: list, fraction: float, minimum: int = 2):
    n_val = min(len(items) - 1, max(minimum, int(round(fraction * len(items)))))
    if len(items) < 2 or n_val < 1:
        return items, items[:1]
    return items[:-n_val], items[-n_val:]


# --------------------------------------------------------------------------
# Pretraining
# --------------------------------------------------------------------------

class _TargetScaler:
    def __init__(self, mean=None, std=None):
        self.mean, self.std = mean, std

    @classmethod
    def fit(cls, targets):
        stacked = np.concatenate(targets, axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0) + 1e-6)

    def __call__(self, z):
        return z if self.mean is None else (z - self.mean) / self.std

    def to_dict(self):
        if self.mean is None:
            return None
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def _scene_pair(spec, source, assets, config: PretrainConfig):
    scene = render(spec, AudioBuffer(source.samples, source.sample_rate), assets)
    z = buffer_features(scene.clean, config.target_kind, config.stft, config.max_lag,
                        config.epsilon)
    x = buffer_features(scene.augmented, FeatureKind.STFT_RI, config.stft)
    return x, z


def _validate(model, batches, loss_fn) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            total += float(loss_fn(model(batch.inputs), batch.targets, batch.mask)) * len(batch.mask)
            count += len(batch.mask)
    model.train()
    return total / max(count, 1)


def pretrain(corpus, assets: Assets | None = None, config: PretrainConfig | None = None,
             log_path=None, validation_corpus=None) -> Checkpoint:
    """Distill clean spatial features from augmented STFT inputs.

    Scenes are rendered online: each step draws a bucket of sources, renders
    them at random azimuths with training-split subjects, RIRs and noise, and
    regresses the clean-pair features from the augmented-pair STFT. The
    checkpoint with the lowest validation loss is returned.
    """
    config = config or PretrainConfig()
    assets = assets or Assets.builtin()
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    if validation_corpus is None:
        corpus, validation_corpus = _split_holdout(corpus, 0.1)
    torch.manual_seed(config.seed)
    target_dim = feature_dim(config.target_kind, config.stft, config.max_lag)
    input_dim = feature_dim(FeatureKind.STFT_RI, config.stft)
    model_config = config.encoder.build(input_dim)
    model = SFDModel(model_config, target_dim)
    optimizer = AdamW(model, config.optim.beta1, config.optim.beta2, config.optim.eps,
                      config.optim.weight_decay)
    schedule = config.optim.schedule()

    rirs = tuple(assets.rirs) + (None,) if config.use_rirs else (None,)
    train_synth = SynthConfig(tuple(config.noise_types), rirs,
                              tuple(assets.subjects("train")), tuple(config.snr_grid))
    val_synth = dataclasses.replace(train_synth, hrir_subjects=tuple(assets.subjects("val")))
    val_assets = assets.with_split("val")
    train_assets = assets.with_split("train")

    val_rng = child_rng("pretrain-val", config.seed)
    val_pairs = []
    for i in range(config.validation_size):
        spec = sample_scene(val_rng, val_synth)
        src = validation_corpus[i % len(validation_corpus)]
        val_pairs.append(_scene_pair(spec, src, val_assets, config))
    scaler = _TargetScaler()
    if config.normalize_targets:
        scaler = _TargetScaler.fit([z for _, z in val_pairs])
    val_batches = [Batch.collate([x for x, _ in val_pairs[i:i + 8]],
                                 [scaler(z) for _, z in val_pairs[i:i + 8]])
                   for i in range(0, len(val_pairs), 8)]

    durations = [buf.duration for buf in corpus]

    def batch_plan():
        epoch = 0
        while True:
            rng = child_rng("bucket", config.seed, epoch)
            for indices in bucket_batch(durations, config.bucket_minutes, rng):
                yield indices
            epoch += 1

    plan = batch_plan()
    plans = [next(plan) for _ in range(config.steps)]

    def make(step):
        rng = child_rng("pretrain-scene", config.seed, step)
        xs, zs = [], []
        for idx in plans[step]:
            spec = sample_scene(rng, train_synth)
            x, z = _scene_pair(spec, corpus[idx], train_assets, config)
            xs.append(x)
            zs.append(scaler(z))
        return Batch.collate(xs, zs)

    init_val = _validate(model, val_batches, mse_loss)
    best_val, best_step = init_val, 0
    best_state = copy.deepcopy(model.state_dict())
    history = [{"step": 0, "val_loss": init_val}]
    log_rows = []
    started = time.time()
    log_file = open(log_path, "w") if log_path else None
    try:
        for step, batch in enumerate(_prefetching(make, config.steps, config.prefetch)):
            lr = lr_at(step, schedule)
            loss = mse_loss(model(batch.inputs), batch.targets, batch.mask)
            if not torch.isfinite(loss):
                raise NumericalError("non-finite pretraining loss",
                                     _diagnostics(model, step, lr, loss))
            loss.backward()
            grad_norm = _global_grad_norm(model)
            if not math.isfinite(grad_norm):
                raise NumericalError("non-finite gradient", _diagnostics(model, step, lr, loss))
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.optim.grad_clip)
            optimizer.step(lr)
            optimizer.zero_grad()
            row = {"step": step + 1, "lr": lr, "loss": loss.item(), "val_loss": None,
                   "wall_clock": round(time.time() - started, 3)}
            if (step + 1) % config.validation_every == 0 or step + 1 == config.steps:
                val = _validate(model, val_batches, mse_loss)
                row["val_loss"] = val
                history.append({"step": step + 1, "val_loss": val})
                if val < best_val:
                    best_val, best_step = val, step + 1
                    best_state = copy.deepcopy(model.state_dict())
            log_rows.append(row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best_state)
    header = {
        "kind": "sfd-pretrain",
        "config": config_to_dict(config),
        "model": model_config.to_dict(),
        "target_dim": target_dim,
        "target_scaler": scaler.to_dict(),
        "schedule": schedule.to_dict(),
        "step": config.steps,
        "metrics": {"init_val_loss": init_val, "best_val_loss": best_val,
                    "best_step": best_step, "history": history},
    }
    return Checkpoint.from_model(model, header, optimizer)


# --------------------------------------------------------------------------
# Fine-tuning
# --------------------------------------------------------------------------

@dataclass
class LabeledUtterance:
    audio: AudioBuffer
    doa: float
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    id: str = ""


def load_labeled(manifest_path, which: str = "augmented") -> list:
    """Labeled stereo utterances from a rendered dataset manifest."""
    out = []
    for entry in read_manifest(manifest_path):
        if entry.status != "ok":
            log.warning("skipping %s: %s", entry.id, entry.error)
            continue
        path = entry.augmented if which == "augmented" else entry.clean
        geom = ArrayGeometry(**entry.geometry) if entry.geometry else ArrayGeometry()
        out.append(LabeledUtterance(read_wav(path), entry.spec.azimuth, geom, entry.id))
    return out


@dataclass
class DoAPredictor:
    """A DoA model bundled with the feature settings it was trained on."""

    model: DoAModel
    input_kind: str = "stft-ri"
    stft: StftConfig = field(default_factory=StftConfig)
    max_lag: int = 256
    resolution: float = 5.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    warmup_frames: int = 0

    def features(self, buffer: AudioBuffer) -> np.ndarray:
        return buffer_features(buffer, self.input_kind, self.stft, self.max_lag)

    def logits(self, buffer: AudioBuffer) -> torch.Tensor:
        if buffer.sample_rate != self.sample_rate:
            raise ValueError(
                f"buffer rate {buffer.sample_rate} Hz, model expects {self.sample_rate} Hz")
        x = torch.from_numpy(self.features(buffer).astype(np.float32))
        self.model.eval()
        with torch.no_grad():
            return self.model(x)

    def predict_degrees(self, buffer: AudioBuffer, geometry=None) -> np.ndarray:
        return predict_doa(self, buffer).degrees

    @classmethod
    def from_checkpoint(cls, checkpoint) -> "DoAPredictor":
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        header = checkpoint.header
        if header.get("kind") != "doa":
            raise ConfigError("checkpoint does not hold a DoA model")
        model = DoAModel(ConformerConfig(**header["model"]), header["n_classes"])
        checkpoint.load_into(model)
        cfg = header["config"]
        return cls(model, cfg["input_kind"], StftConfig(**cfg["stft"]), cfg["input_max_lag"],
                   cfg["resolution"], header.get("sample_rate", DEFAULT_SAMPLE_RATE))


@dataclass
class DoAPrediction:
    classes: np.ndarray
    degrees: np.ndarray
    posteriors: np.ndarray


def predict_doa(predictor: DoAPredictor, buffer: AudioBuffer) -> DoAPrediction:
    logits = predictor.logits(buffer)
    post = torch.softmax(logits, dim=-1).numpy()
    classes = np.argmax(post, axis=-1)
    return DoAPrediction(classes, dequantize_doa(classes, predictor.resolution), post)


@dataclass
class FinetuneResult:
    predictor: DoAPredictor
    checkpoint: Checkpoint
    log: list


def _frame_labels(n_frames: int, doa: float, resolution: float) -> np.ndarray:
    return np.full(n_frames, quantize_doa(doa, resolution), dtype=np.int64)


def finetune(labeled_dataset, config: FinetuneConfig | None = None,
             assets: Assets | None = None, validation=None, log_path=None) -> FinetuneResult:
    """Train a frame-level DoA classifier, optionally from a distilled encoder.

    Every valid frame carries its utterance's quantized label. Diffuse noise
    is added online at a random grid SNR when ``config.augment`` is set.
    """
    config = config or FinetuneConfig()
    assets = assets or Assets.builtin()
    data = list(labeled_dataset)
    if not data:
        raise ConfigError("labeled dataset is empty")
    if validation is None:
        data, validation = _split_holdout(data, config.validation_fraction)
    validation = list(validation)
    torch.manual_seed(config.seed)
    input_dim = feature_dim(config.input_kind, config.stft, config.input_max_lag)
    model_config = config.encoder.build(input_dim)
    k = n_classes(config.resolution)
    model = DoAModel(model_config, k)
    init_source = "random"
    if config.init != "random":
        ckpt = Checkpoint.load(config.init)
        if ckpt.header.get("model", {}).get("input_dim") != input_dim:
            raise ConfigError(
                f"checkpoint encoder expects {ckpt.header.get('model', {}).get('input_dim')} "
                f"input features, {config.input_kind} gives {input_dim}")
        if ckpt.header.get("model") != model_config.to_dict():
            raise ConfigError("checkpoint encoder config differs from the fine-tune config")
        ckpt.load_into(model, prefix="encoder.")
        init_source = str(config.init)
    if config.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    optimizer = AdamW(model, config.optim.beta1, config.optim.beta2, config.optim.eps,
                      config.optim.weight_decay)
    schedule = config.optim.schedule()
    predictor = DoAPredictor(model, config.input_kind, config.stft, config.input_max_lag,
                             config.resolution, data[0].audio.sample_rate)
    train_assets = assets.with_split("train")
    val_assets = assets.with_split("val")

    def noisy(utt, rng, assets_):
        if not config.augment:
            return utt.audio
        noise = config.noise_types[rng.integers(len(config.noise_types))]
        snr = float(config.snr_grid[rng.integers(len(config.snr_grid))])
        seed = int(rng.integers(2**31 - 1))
        return add_diffuse_noise(utt.audio, noise, snr, seed, assets_, utt.geometry)

    val_rng = child_rng("finetune-val", config.seed)
    val_items = []
    for utt in validation:
        x = predictor.features(noisy(utt, val_rng, val_assets))
        val_items.append((x, _frame_labels(x.shape[0], utt.doa, config.resolution)))
    val_batches = [Batch.collate([x for x, _ in val_items[i:i + 8]],
                                 [y for _, y in val_items[i:i + 8]])
                   for i in range(0, len(val_items), 8)]

    def make(step):
        epoch_size = max(1, len(data) // config.batch_size)
        epoch, pos = divmod(step, epoch_size)
        order = child_rng("finetune-order", config.seed, epoch).permutation(len(data))
        picks = order[pos * config.batch_size:(pos + 1) * config.batch_size]
        if len(picks) == 0:
            picks = order[: config.batch_size]
        rng = child_rng("finetune-noise", config.seed, step)
        xs, ys = [], []
        for i in picks:
            x = predictor.features(noisy(data[i], rng, train_assets))
            xs.append(x)
            ys.append(_frame_labels(x.shape[0], data[i].doa, config.resolution))
        return Batch.collate(xs, ys)

    def val_metrics():
        loss = _validate(model, val_batches, cross_entropy_loss)
        errors = []
        model.eval()
        with torch.no_grad():
            for batch in val_batches:
                pred = dequantize_doa(model(batch.inputs).argmax(-1).numpy(), config.resolution)
                truth = dequantize_doa(batch.targets.numpy(), config.resolution)
                m = batch.mask.numpy() > 0
                errors.extend(np.abs(pred - truth)[m].tolist())
        model.train()
        return loss, float(np.mean(errors)) if errors else float("nan")

    init_loss, init_mae = val_metrics()
    best = (init_loss, 0)
    best_state = copy.deepcopy(model.state_dict())
    rows = [{"step": 0, "lr": 0.0, "loss": None, "val_loss": init_loss, "val_mae": init_mae}]
    started = time.time()
    log_file = open(log_path, "w") if log_path else None
    if log_file:
        log_file.write(json.dumps(rows[0]) + "\n")
    try:
        for step, batch in enumerate(_prefetching(make, config.steps, False)):
            lr = lr_at(step, schedule)
            loss = cross_entropy_loss(model(batch.inputs), batch.targets, batch.mask)
            if not torch.isfinite(loss):
                raise NumericalError("non-finite fine-tuning loss",
                                     _diagnostics(model, step, lr, loss))
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for p in model.parameters() if p.requires_grad], config.optim.grad_clip)
            optimizer.step(lr)
            optimizer.zero_grad()
            row = {"step": step + 1, "lr": lr, "loss": loss.item(), "val_loss": None,
                   "wall_clock": round(time.time() - started, 3)}
            if (step + 1) % config.validation_every == 0 or step + 1 == config.steps:
                val_loss, val_mae = val_metrics()
                row.update(val_loss=val_loss, val_mae=val_mae)
                if val_loss < best[0]:
                    best = (val_loss, step + 1)
                    best_state = copy.deepcopy(model.state_dict())
            rows.append(row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best_state)
    header = {
        "kind": "doa",
        "config": config_to_dict(config),
        "model": model_config.to_dict(),
        "n_classes": k,
        "init": init_source,
        "sample_rate": predictor.sample_rate,
        "schedule": schedule.to_dict(),
        "step": config.steps,
        "metrics": {"init_val_loss": init_loss, "best_val_loss": best[0],
                    "best_step": best[1]},
    }
    return FinetuneResult(predictor, Checkpoint.from_model(model, header, optimizer), rows)
