import numpy as np
import pytest
from hypothesis import settings

from stvae.genmodel import GammaPrior, SpeechVAE
from stvae.signal import StftConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# 30-sample sine window with 50% overlap gives F = 16 frequency bins
SMALL_STFT = StftConfig(window_len=30, hop=15)
TINY_STFT = StftConfig(window_len=14, hop=7)  # F = 8


def make_model(kind="stvae", stft_config=TINY_STFT, latent_dim=2, hidden=(4,), seed=0,
               prior=None, input_transform="power"):
    rng = np.random.default_rng(seed)
    return SpeechVAE.init(kind, rng, stft_config, latent_dim, hidden, prior or GammaPrior(),
                          input_transform)


@pytest.fixture
def tiny_model():
    return make_model()


def random_power(rng, n_frames, n_freq):
    return rng.gamma(1.0, 1.0, size=(n_frames, n_freq)) * rng.uniform(0.2, 2.0, size=(n_frames, 1))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
