"""
Synthetic voice corpus.

Test fixture, not a clinical simulator. Each patient gets a harmonic voice
source with formant-like band emphasis. PD-like patients add a slow tremor
(amplitude and frequency modulation at 4-7 Hz), more jitter and shimmer and a
louder breath-noise floor, all scaled by a single severity value that also
decides the Hoehn-Yahr grade.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._dask import parallel_map
from .audio_io import TARGET_RATE, AudioClip, write_wav
from .data import HY_DISTRIBUTION, catalog_utterances
from .manifest import PatientRecord, SampleEntry, write_manifest
from .math import derive_rng
from .types import Label, SomePath, UtteranceType

__all__ = [
    "SynthConfig",
    "VoiceParams",
    "synth_voice",
    "hy_grades_from_severity",
    "synth_generate",
]

_LOG = logging.getLogger(__name__)

Range = Tuple[float, float]

STEREO_RATE = 44_100
PEAK_LEVEL = 0.9
MAX_HARMONICS = 30

# (F1, F2, F3) in Hz
_FORMANTS = {
    "a": (800.0, 1200.0, 2500.0),
    "e": (550.0, 1800.0, 2500.0),
    "i": (300.0, 2300.0, 3000.0),
    "o": (500.0, 900.0, 2400.0),
    "u": (350.0, 800.0, 2300.0),
    "y": (400.0, 1600.0, 2500.0),
}
_FOLD = str.maketrans({"ą": "a", "ę": "e", "ó": "u"})


def _check_unit_range(name: str, rr: Sequence[float]) -> Range:
    lo, hi = (float(v) for v in rr)
    if not 0 <= lo <= hi <= 1:
        raise ValueError(f"{name}: expect 0 <= lo <= hi <= 1, got {rr}")
    return (lo, hi)


@dataclass(frozen=True)
class SynthConfig:
    """
    Corpus generation settings.

    Severity ``s`` in ``[0, 1]`` is drawn per PD patient and mapped linearly
    into every ``*_range`` below, so all pathology parameters grow together.
    """

    n_pd: int = 12
    n_hp: int = 8
    samples_per_patient: int = 43
    duration_range: Range = (1.0, 1.0)
    sample_rate: int = TARGET_RATE
    stereo: bool = False
    f0_range: Range = (120.0, 220.0)
    tremor_freq_range: Range = (4.0, 7.0)
    tremor_depth_range: Range = (0.15, 0.5)
    jitter_hp: float = 0.003
    jitter_pd_range: Range = (0.01, 0.03)
    shimmer_hp: float = 0.02
    shimmer_pd_range: Range = (0.06, 0.2)
    noise_floor_hp: float = 0.005
    noise_floor_pd_range: Range = (0.02, 0.08)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_pd < 1 or self.n_hp < 1:
            raise ValueError(f"Need at least one patient per group, got n_pd={self.n_pd}, n_hp={self.n_hp}")
        if self.samples_per_patient < 1:
            raise ValueError(f"samples_per_patient must be >= 1, got {self.samples_per_patient}")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValueError(f"duration_range: expect 0 < lo <= hi, got {self.duration_range}")
        if self.sample_rate < 8000:
            raise ValueError(f"sample_rate too low: {self.sample_rate}")
        lo, hi = self.f0_range
        if not 50 <= lo <= hi <= 500:
            raise ValueError(f"f0_range: expect 50 <= lo <= hi <= 500, got {self.f0_range}")
        lo, hi = self.tremor_freq_range
        if not 3 <= lo <= hi <= 12:
            raise ValueError(f"tremor_freq_range: expect within [3, 12] Hz, got {self.tremor_freq_range}")
        for name in ("tremor_depth_range", "jitter_pd_range", "shimmer_pd_range", "noise_floor_pd_range"):
            object.__setattr__(self, name, _check_unit_range(name, getattr(self, name)))
        for name in ("jitter_hp", "shimmer_hp", "noise_floor_hp"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}: expect value in [0, 1], got {v}")
        object.__setattr__(self, "duration_range", tuple(float(v) for v in self.duration_range))
        object.__setattr__(self, "f0_range", tuple(float(v) for v in self.f0_range))
        object.__setattr__(self, "tremor_freq_range", tuple(float(v) for v in self.tremor_freq_range))

    @property
    def output_rate(self) -> int:
        return STEREO_RATE if self.stereo else self.sample_rate

    @property
    def num_files(self) -> int:
        return (self.n_pd + self.n_hp) * self.samples_per_patient

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @staticmethod
    def from_dict(dd: Dict[str, Any]) -> "SynthConfig":
        return SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in dd.items()})


@dataclass(frozen=True)
class VoiceParams:
    """Voice of one patient, ``tremor_depth == 0`` means no tremor."""

    f0: float
    jitter: float
    shimmer: float
    noise_floor: float
    tremor_freq: float = 0.0
    tremor_depth: float = 0.0

    @staticmethod
    def healthy(cfg: SynthConfig, rng: np.random.Generator) -> "VoiceParams":
        return VoiceParams(
            f0=float(rng.uniform(*cfg.f0_range)),
            jitter=cfg.jitter_hp,
            shimmer=cfg.shimmer_hp,
            noise_floor=cfg.noise_floor_hp,
        )

    @staticmethod
    def parkinsonian(cfg: SynthConfig, severity: float, rng: np.random.Generator) -> "VoiceParams":
        def lerp(rr: Range) -> float:
            return rr[0] + severity * (rr[1] - rr[0])

        return VoiceParams(
            f0=float(rng.uniform(*cfg.f0_range)),
            jitter=lerp(cfg.jitter_pd_range),
            shimmer=lerp(cfg.shimmer_pd_range),
            noise_floor=lerp(cfg.noise_floor_pd_range),
            tremor_freq=float(rng.uniform(*cfg.tremor_freq_range)),
            tremor_depth=lerp(cfg.tremor_depth_range),
        )


def _formants(text: str) -> Tuple[float, float, float]:
    for ch in text.lower().translate(_FOLD):
        if ch in _FORMANTS:
            return _FORMANTS[ch]
    return _FORMANTS["a"]


def _band_gain(freqs: np.ndarray, formants: Sequence[float], bandwidth: float = 120.0) -> np.ndarray:
    g = np.full(freqs.shape, 0.05)
    for i, fc in enumerate(formants):
        g += np.exp(-0.5 * ((freqs - fc) / bandwidth) ** 2) / (i + 1)
    return g


def _per_cycle(values: np.ndarray, t: np.ndarray, f0: float) -> np.ndarray:
    # piecewise linear between glottal cycle boundaries
    knots = np.arange(values.shape[0]) / f0
    return np.interp(t, knots, values)


def _envelope(kind: UtteranceType, n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    ramp = min(int(0.02 * rate), n // 4)
    env = np.ones(n)
    if kind is UtteranceType.WORD or kind is UtteranceType.SENTENCE:
        nseg = 2 if kind is UtteranceType.WORD else int(rng.integers(4, 8))
        gap = int(0.03 * rate)
        bounds = np.linspace(0, n, nseg + 1).astype(int)
        for b in bounds[1:-1]:
            env[max(0, b - gap // 2) : b + gap // 2] = 0.15
    if ramp > 0:
        rr = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        env[:ramp] *= rr
        env[-ramp:] *= rr[::-1]
    return env


def synth_voice(
    voice: VoiceParams,
    kind: UtteranceType,
    text: str,
    duration: float,
    sample_rate: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    One mono utterance, peak scaled to ``0.9``.

    Tremor modulates amplitude by ``tremor_depth`` and frequency by a tenth of
    it, which puts sidebands at ``f0 +/- tremor_freq``.
    """
    n = max(1, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate
    n_cycles = int(np.ceil(duration * voice.f0 * 1.5)) + 2

    cycle_jitter = rng.normal(0.0, voice.jitter, n_cycles)
    cycle_shimmer = rng.normal(0.0, voice.shimmer, n_cycles)
    phi = rng.uniform(0, 2 * np.pi)
    tremor = np.sin(2 * np.pi * voice.tremor_freq * t + phi) if voice.tremor_depth > 0 else np.zeros(n)

    inst_f0 = voice.f0 * (1 + 0.1 * voice.tremor_depth * tremor) / (1 + _per_cycle(cycle_jitter, t, voice.f0))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate

    n_harm = int(min(MAX_HARMONICS, (0.45 * sample_rate) // voice.f0))
    hh = np.arange(1, n_harm + 1)
    gains = _band_gain(hh * voice.f0, _formants(text)) / hh
    x = np.sin(np.outer(phase, hh)) @ gains

    amp = (1 + voice.tremor_depth * tremor) * (1 + _per_cycle(cycle_shimmer, t, voice.f0))
    x = x * np.clip(amp, 0, None)

    rms = float(np.sqrt(np.mean(x * x))) or 1.0
    x = x + rng.normal(0.0, voice.noise_floor * rms, n)
    x = x * _envelope(kind, n, sample_rate, rng)

    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x = x * (PEAK_LEVEL / peak)
    return x


def hy_grades_from_severity(severity: Sequence[float]) -> List[int]:
    """
    Hoehn-Yahr grades by severity rank.

    Rank quantiles are binned to follow the clinical cohort proportions, so
    the grade never decreases as severity increases.
    """
    sev = np.asarray(severity, dtype="float64")
    n = sev.shape[0]
    if n == 0:
        return []
    counts = np.array([HY_DISTRIBUTION[f"HY{g}"] for g in range(1, 6)], dtype="float64")
    edges = np.cumsum(counts) / counts.sum()
    ranks = np.argsort(np.argsort(sev, kind="stable"), kind="stable")
    centres = (ranks + 0.5) / n
    grades = np.searchsorted(edges, centres, side="left") + 1
    return [int(min(g, 5)) for g in grades]


@dataclass(frozen=True)
class _PatientJob:
    index: int
    patient_id: str
    label: Label
    hy_grade: Optional[int]
    voice: VoiceParams


def _generate_patient(args: Tuple[_PatientJob, SynthConfig, Path]) -> PatientRecord:
    job, cfg, out_dir = args
    rng = derive_rng(cfg.seed, 1, job.index)
    utterances = catalog_utterances()
    rate = cfg.output_rate

    pdir = out_dir / "wav" / job.patient_id
    pdir.mkdir(parents=True, exist_ok=True)

    samples = []
    for i in range(cfg.samples_per_patient):
        kind, text = utterances[i % len(utterances)]
        duration = float(rng.uniform(*cfg.duration_range))
        x = synth_voice(job.voice, kind, text, duration, rate, rng)
        if cfg.stereo:
            # antiphase voice over a shared bed: left minus right cancels the bed
            bed = rng.normal(0.0, 0.05, x.shape[0])
            xx = np.stack([x / 2 + bed, -x / 2 + bed])
            xx *= PEAK_LEVEL / float(np.max(np.abs(xx)))
        else:
            xx = x.reshape(1, -1)
        clip = AudioClip(xx, rate)
        fname = pdir / f"{i:02d}_{kind.value}.wav"
        write_wav(clip, fname)
        samples.append(SampleEntry(fname, kind, clip.duration, text))

    _LOG.debug("Generated %s: %d clips", job.patient_id, len(samples))
    return PatientRecord(job.patient_id, job.label, job.hy_grade, samples)


def _plan(cfg: SynthConfig) -> List[_PatientJob]:
    rng = derive_rng(cfg.seed, 0)
    severity = rng.uniform(0.0, 1.0, cfg.n_pd)
    grades = hy_grades_from_severity(severity)
    width = len(str(max(cfg.n_pd, cfg.n_hp)))

    jobs = []
    for i in range(cfg.n_pd):
        voice = VoiceParams.parkinsonian(cfg, float(severity[i]), derive_rng(cfg.seed, 2, i))
        jobs.append(_PatientJob(len(jobs), f"PD{i + 1:0{width}d}", Label.PD, grades[i], voice))
    for i in range(cfg.n_hp):
        voice = VoiceParams.healthy(cfg, derive_rng(cfg.seed, 3, i))
        jobs.append(_PatientJob(len(jobs), f"HP{i + 1:0{width}d}", Label.HP, None, voice))
    return jobs


def synth_generate(cfg: SynthConfig, out_dir: SomePath, threads: int = 1) -> Path:
    """
    Write a synthetic corpus and its manifest.

    Layout is ``out_dir/wav/<patient>/<nn>_<utterance_type>.wav`` plus
    ``out_dir/manifest.csv``. Utterances follow the phonetic catalog order,
    cycling when ``samples_per_patient`` exceeds it. Output is identical for
    the same config regardless of ``threads``.

    :return: Path to the manifest
    """
    out_dir = Path(out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = _plan(cfg)
    records = parallel_map(_generate_patient, [(job, cfg, out_dir) for job in jobs], threads=threads)
    manifest = write_manifest(records, out_dir / "manifest.csv")
    _LOG.info("Synthesised %d patients, %d clips into %s", len(records), cfg.num_files, out_dir)
    return manifest
