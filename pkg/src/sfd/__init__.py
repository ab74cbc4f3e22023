"""Binaural DoA estimation with spatial feature distillation."""

from sfd.exceptions import AssetError, ConfigError, NumericalError, SFDError
from sfd.features import ArrayGeometry, FeatureKind
from sfd.scene import Assets, SceneSpec
from sfd.signal import AudioBuffer, StftConfig

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry",
    "AssetError",
    "Assets",
    "AudioBuffer",
    "ConfigError",
    "FeatureKind",
    "NumericalError",
    "SFDError",
    "SceneSpec",
    "StftConfig",
]
