import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def assets():
    from sfd.scene import Assets

    return Assets.builtin()


def delayed_pair(n, delay, rng, noise=None):
    """White noise on channel 0 and the same noise shifted by ``delay`` on channel 1."""
    from sfd.signal import AudioBuffer

    pad = abs(delay) + 1
    x = rng.standard_normal(n + 2 * pad)
    left = x[pad: pad + n]
    right = x[pad - delay: pad - delay + n]
    samples = np.stack([left, right])
    if noise is not None:
        samples = samples + noise * rng.standard_normal(samples.shape)
    return AudioBuffer(samples)
