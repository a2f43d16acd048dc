from pathlib import Path

import numpy as np
import pytest

from voicepd.audio_io import AudioClip, write_wav
from voicepd.synth import SynthConfig, synth_generate
from voicepd.testutils import miniature_model, sine

# pylint: disable=redefined-outer-name


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)


@pytest.fixture()
def tone_wav(tmp_path) -> Path:
    """Mono 16 kHz, 0.5 s, 440 Hz at half scale."""
    path = tmp_path / "tone.wav"
    write_wav(AudioClip.mono(sine(440, 0.5, 16_000, 0.5), 16_000), path)
    return path


@pytest.fixture()
def stereo_wav(tmp_path) -> Path:
    """Stereo 44.1 kHz, 0.25 s, antiphase tone over a shared noise bed."""
    rate = 44_100
    x = sine(300, 0.25, rate, 0.3)
    bed = np.random.default_rng(1).normal(0, 0.05, x.shape[0])
    path = tmp_path / "stereo.wav"
    write_wav(AudioClip(np.stack([x + bed, -x + bed]), rate), path)
    return path


@pytest.fixture()
def mini():
    return miniature_model(seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> Path:
    """Two PD and two HP patients, four short clips each."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(n_pd=2, n_hp=2, samples_per_patient=4, duration_range=(0.3, 0.3), seed=7)
    return synth_generate(cfg, out)
