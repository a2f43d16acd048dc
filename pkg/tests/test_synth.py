from collections import Counter

import numpy as np
import pytest
from scipy.signal import get_window

from voicepd.audio_io import preprocess, read_wav
from voicepd.data import HY_DISTRIBUTION
from voicepd.manifest import group_counts, load_manifest
from voicepd.math import derive_rng
from voicepd.synth import SynthConfig, VoiceParams, hy_grades_from_severity, synth_generate, synth_voice
from voicepd.types import UtteranceType


def _wav_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*.wav"))


def test_corpus_structure(tiny_corpus):
    root = tiny_corpus.parent
    files = _wav_files(root)
    assert len(files) == 16
    assert str(files[0].as_posix()) == "wav/HP1/00_vowel.wav"

    records = load_manifest(tiny_corpus)
    assert group_counts(records) == {"PD": 2, "HP": 2}
    for rec in records:
        assert [s.utterance_type for s in rec.samples] == [UtteranceType.VOWEL] * 4
        assert [s.text for s in rec.samples] == ["a", "e", "i", "u"]
    assert all(1 <= rec.hy_grade <= 5 for rec in records[:2])
    assert records[2].hy_grade is None


def test_deterministic(tmp_path):
    cfg = SynthConfig(n_pd=2, n_hp=1, samples_per_patient=3, duration_range=(0.1, 0.3), seed=3)
    a = synth_generate(cfg, tmp_path / "a")
    b = synth_generate(cfg, tmp_path / "b", threads=3)
    assert _wav_files(a.parent) == _wav_files(b.parent)
    for rel in _wav_files(a.parent):
        assert (a.parent / rel).read_bytes() == (b.parent / rel).read_bytes()

    c = synth_generate(SynthConfig.from_dict({**cfg.to_dict(), "seed": 4}), tmp_path / "c")
    first = _wav_files(a.parent)[0]
    assert (a.parent / first).read_bytes() != (c.parent / first).read_bytes()


def test_stereo(tmp_path):
    cfg = SynthConfig(n_pd=1, n_hp=1, samples_per_patient=2, duration_range=(0.2, 0.2), stereo=True)
    records = load_manifest(synth_generate(cfg, tmp_path))
    clip = read_wav(records[0].samples[0].path)
    assert clip.channels == 2
    assert clip.sample_rate == 44_100

    out = preprocess(clip)
    assert not out.silent
    assert out.sample_rate == 16_000
    assert out.num_samples == 3200


def _sideband_ratio(x, f0, fm, rate):
    spec = np.abs(np.fft.rfft(x * get_window("hann", x.shape[0])))
    df = rate / x.shape[0]

    def peak(f):
        k = int(round(f / df))
        return spec[k - 1 : k + 2].max()

    return (peak(f0 - fm) + peak(f0 + fm)) / peak(f0)


def test_tremor_sidebands():
    rate, f0, fm = 16_000, 150.0, 5.0
    tremor = VoiceParams(f0, jitter=0.0, shimmer=0.0, noise_floor=0.0, tremor_freq=fm, tremor_depth=0.4)
    steady = VoiceParams(f0, jitter=0.0, shimmer=0.0, noise_floor=0.0)

    x_pd = synth_voice(tremor, UtteranceType.SUSTAINED_VOWEL, "a", 2.0, rate, derive_rng(1))
    x_hp = synth_voice(steady, UtteranceType.SUSTAINED_VOWEL, "a", 2.0, rate, derive_rng(1))
    assert np.abs(x_pd).max() == pytest.approx(0.9)

    assert _sideband_ratio(x_pd, f0, fm, rate) > 0.2
    assert _sideband_ratio(x_hp, f0, fm, rate) < 0.01


def test_hy_grades():
    rng = np.random.default_rng(5)
    for n in (1, 5, 12, 38):
        sev = rng.uniform(0, 1, n)
        grades = hy_grades_from_severity(sev)
        assert all(1 <= g <= 5 for g in grades)
        ordered = [g for _, g in sorted(zip(sev, grades))]
        assert ordered == sorted(ordered)

    counts = Counter(hy_grades_from_severity(np.linspace(0, 1, 38)))
    assert {f"HY{g}": c for g, c in counts.items()} == {k: v for k, v in HY_DISTRIBUTION.items() if k != "HP"}
    assert hy_grades_from_severity([]) == []


def test_severity_monotone():
    cfg = SynthConfig()
    mild = VoiceParams.parkinsonian(cfg, 0.1, derive_rng(0))
    severe = VoiceParams.parkinsonian(cfg, 0.9, derive_rng(0))
    assert mild.tremor_depth < severe.tremor_depth
    assert mild.jitter < severe.jitter
    assert mild.noise_floor < severe.noise_floor
    assert 4 <= severe.tremor_freq <= 7

    healthy = VoiceParams.healthy(cfg, derive_rng(0))
    assert healthy.tremor_depth == 0
    assert healthy.jitter <= 0.003


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_pd=0),
        dict(n_hp=0),
        dict(samples_per_patient=0),
        dict(duration_range=(0.0, 1.0)),
        dict(duration_range=(2.0, 1.0)),
        dict(tremor_freq_range=(2.0, 7.0)),
        dict(tremor_depth_range=(0.2, 1.5)),
        dict(jitter_hp=-0.1),
        dict(f0_range=(30.0, 200.0)),
        dict(sample_rate=4000),
    ],
)
def test_config_errors(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_config_defaults():
    cfg = SynthConfig()
    assert cfg.samples_per_patient == 43
    assert cfg.num_files == 20 * 43
    assert SynthConfig(stereo=True).output_rate == 44_100
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
