"""scikit-learn style wrappers around the feature, baseline and training APIs.

Inputs are lists of signals: ``AudioBuffer`` objects, ``(channels, samples)``
arrays or WAV paths. Outputs are per-utterance lists because utterances
differ in frame count.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from sfd._validation import check_labels, check_mono, check_stereo
from sfd.evaluation import GccPhatArgmax, angular_error
from sfd.features import ArrayGeometry, buffer_features, feature_dim
from sfd.signal import DEFAULT_SAMPLE_RATE, StftConfig
from sfd.training import (
    EncoderSettings,
    FinetuneConfig,
    LabeledUtterance,
    OptimSettings,
    PretrainConfig,
    finetune,
    predict_doa,
    pretrain,
)
from sfd.nn import ConformerConfig, SFDModel


def _stft(est) -> StftConfig:
    return StftConfig(est.window_length, est.hop_length, est.fft_size, est.window)


class SpatialFeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless per-frame spatial features of stereo signals."""

    def __init__(self, kind="gcc-phat", max_lag=14, epsilon=1e-8, window_length=400,
                 hop_length=160, fft_size=512, window="hann", sample_rate=DEFAULT_SAMPLE_RATE):
        self.kind = kind
        self.max_lag = max_lag
        self.epsilon = epsilon
        self.window_length = window_length
        self.hop_length = hop_length
        self.fft_size = fft_size
        self.window = window
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        self.n_features_out_ = feature_dim(self.kind, _stft(self), self.max_lag)
        return self

    def transform(self, X):
        check_is_fitted(self)
        config = _stft(self)
        return [buffer_features(b, self.kind, config, self.max_lag, self.epsilon)
                for b in check_stereo(X, self.sample_rate)]


class _DoAScoring:
    def score(self, X, y):
        """Negative mean utterance angular error (higher is better)."""
        preds = self.predict(X)
        y = check_labels(y, len(preds))
        return -float(np.mean([np.mean(angular_error(np.clip(p, -90, 90), t))
                               for p, t in zip(preds, y)]))


class GccPhatDoAEstimator(_DoAScoring, BaseEstimator):
    """Zero-parameter GCC-PHAT argmax DoA estimator."""

    def __init__(self, mic_distance=0.18, speed_of_sound=343.0, pool_window=100, max_lag=None,
                 window_length=400, hop_length=160, fft_size=512, window="hann",
                 sample_rate=DEFAULT_SAMPLE_RATE):
        self.mic_distance = mic_distance
        self.speed_of_sound = speed_of_sound
        self.pool_window = pool_window
        self.max_lag = max_lag
        self.window_length = window_length
        self.hop_length = hop_length
        self.fft_size = fft_size
        self.window = window
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        self.geometry_ = ArrayGeometry(self.mic_distance, self.speed_of_sound, self.sample_rate)
        self.baseline_ = GccPhatArgmax(_stft(self), self.pool_window, self.max_lag)
        return self

    def predict(self, X):
        check_is_fitted(self)
        return [self.baseline_.predict_degrees(b, self.geometry_)
                for b in check_stereo(X, self.sample_rate)]


class SFDPretrainer(TransformerMixin, BaseEstimator):
    """Distillation pretraining on mono sources; transforms stereo input to embeddings."""

    def __init__(self, target_kind="cps-phase", steps=500, bucket_minutes=0.25, max_lag=14,
                 lr_max=1e-3, lr_min=5e-7, warmup_steps=100, cycle_steps=2000,
                 validation_every=250, validation_size=16, seed=0, assets=None,
                 sample_rate=DEFAULT_SAMPLE_RATE):
        self.target_kind = target_kind
        self.steps = steps
        self.bucket_minutes = bucket_minutes
        self.max_lag = max_lag
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.warmup_steps = warmup_steps
        self.cycle_steps = cycle_steps
        self.validation_every = validation_every
        self.validation_size = validation_size
        self.seed = seed
        self.assets = assets
        self.sample_rate = sample_rate

    def fit(self, X, y=None):
        config = PretrainConfig(
            target_kind=self.target_kind, steps=self.steps, bucket_minutes=self.bucket_minutes,
            max_lag=self.max_lag, validation_every=self.validation_every,
            validation_size=self.validation_size, seed=self.seed,
            optim=OptimSettings(lr_max=self.lr_max, lr_min=self.lr_min,
                                warmup_steps=self.warmup_steps, cycle_steps=self.cycle_steps))
        self.checkpoint_ = pretrain(check_mono(X, self.sample_rate), self.assets, config)
        header = self.checkpoint_.header
        self.model_ = SFDModel(ConformerConfig(**header["model"]), header["target_dim"])
        self.checkpoint_.load_into(self.model_)
        self.model_.eval()
        self.history_ = header["metrics"]["history"]
        return self

    def transform(self, X):
        """Per-frame encoder embeddings of stereo inputs."""
        check_is_fitted(self)
        out = []
        with torch.no_grad():
            for b in check_stereo(X, self.sample_rate):
                x = torch.from_numpy(buffer_features(b, "stft-ri").astype(np.float32))
                out.append(self.model_.encoder(x).numpy())
        return out

    def save(self, path):
        check_is_fitted(self)
        return self.checkpoint_.save(path)


class DoAClassifier(_DoAScoring, BaseEstimator):
    """Frame-level DoA classifier trained from scratch or from a pretrained encoder."""

    def __init__(self, init="random", input_kind="stft-ri", input_max_lag=256, steps=1000,
                 batch_size=8, resolution=5.0, lr_max=1e-3, lr_min=5e-7, warmup_steps=10,
                 cycle_steps=1000, augment=True, freeze_encoder=False, validation_every=250,
                 seed=0, assets=None, mic_distance=0.18, sample_rate=DEFAULT_SAMPLE_RATE):
        self.init = init
        self.input_kind = input_kind
        self.input_max_lag = input_max_lag
        self.steps = steps
        self.batch_size = batch_size
        self.resolution = resolution
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.warmup_steps = warmup_steps
        self.cycle_steps = cycle_steps
        self.augment = augment
        self.freeze_encoder = freeze_encoder
        self.validation_every = validation_every
        self.seed = seed
        self.assets = assets
        self.mic_distance = mic_distance
        self.sample_rate = sample_rate

    def fit(self, X, y):
        buffers = check_stereo(X, self.sample_rate)
        labels = check_labels(y, len(buffers))
        geometry = ArrayGeometry(self.mic_distance, sample_rate=self.sample_rate)
        data = [LabeledUtterance(b, float(t), geometry, str(i))
                for i, (b, t) in enumerate(zip(buffers, labels))]
        config = FinetuneConfig(
            init=str(self.init), input_kind=self.input_kind, input_max_lag=self.input_max_lag,
            steps=self.steps, batch_size=self.batch_size, resolution=self.resolution,
            augment=self.augment, freeze_encoder=self.freeze_encoder,
            validation_every=self.validation_every, seed=self.seed,
            encoder=EncoderSettings(),
            optim=OptimSettings(lr_max=self.lr_max, lr_min=self.lr_min,
                                warmup_steps=self.warmup_steps, cycle_steps=self.cycle_steps))
        result = finetune(data, config, self.assets)
        self.predictor_ = result.predictor
        self.checkpoint_ = result.checkpoint
        self.log_ = result.log
        self.classes_ = np.arange(self.predictor_.model.classifier.weight.shape[1])
        return self

    def predict(self, X):
        """Per-frame DoA estimates in degrees, one array per utterance."""
        check_is_fitted(self)
        return [predict_doa(self.predictor_, b).degrees for b in check_stereo(X, self.sample_rate)]

    def predict_proba(self, X):
        check_is_fitted(self)
        return [predict_doa(self.predictor_, b).posteriors
                for b in check_stereo(X, self.sample_rate)]

    def save(self, path):
        check_is_fitted(self)
        return self.checkpoint_.save(path)
