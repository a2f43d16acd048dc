"""
Helpers shared by the test-suite and quick experiments.
"""
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .audio_io import TARGET_RATE, AudioClip
from .data import HY_DISTRIBUTION
from .evaluation import VotingResult, vote
from .manifest import Dataset, Sample
from .math import rel_error
from .model import ModelConfig, ModelParams, Prediction
from .types import Label

# pylint: disable=invalid-name


def sine(
    freq: float,
    duration: float = 1.0,
    sample_rate: int = TARGET_RATE,
    amplitude: float = 1.0,
    phase: float = 0.0,
) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t + phase)


def sine_clip(freq: float, duration: float = 1.0, sample_rate: int = TARGET_RATE, amplitude: float = 0.5) -> AudioClip:
    return AudioClip.mono(sine(freq, duration, sample_rate, amplitude), sample_rate)


def power_db(p_signal: float, p_noise: float) -> float:
    """``10*log10(p_signal/p_noise)``."""
    return float(10.0 * np.log10(p_signal / p_noise))


def loglog_slope(freqs: np.ndarray, psd: np.ndarray) -> float:
    """Least-squares slope of ``log10(psd)`` against ``log10(freqs)``."""
    keep = (freqs > 0) & (psd > 0)
    slope, _ = np.polyfit(np.log10(freqs[keep]), np.log10(psd[keep]), 1)
    return float(slope)


def stereo_clip(left: np.ndarray, right: np.ndarray, sample_rate: int = TARGET_RATE) -> AudioClip:
    return AudioClip(np.stack([left, right]).astype("float64"), sample_rate)


def numeric_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    Central difference gradient of ``fn()`` w.r.t. every entry of ``x``.

    ``x`` is perturbed in place and restored.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.shape[0]):
        v = flat[i]
        flat[i] = v + eps
        fp = fn()
        flat[i] = v - eps
        fm = fn()
        flat[i] = v
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(
    fn: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    floor_: float = 1e-5,
    atol: float = 1e-8,
) -> Dict[str, float]:
    """
    Max relative error per named array.

    Entries smaller than ``floor_`` are compared in absolute terms, central
    differences can not resolve them any better. Entries that agree within
    ``atol`` count as exact, e.g. gradients that are zero analytically and
    pure roundoff numerically.
    """
    out = {}
    for name, x in arrays.items():
        ana = np.asarray(analytic[name], dtype="float64")
        num = numeric_grad(fn, x, eps)
        close = np.abs(ana - num) <= atol
        out[name] = rel_error(np.where(close, 0.0, ana), np.where(close, 0.0, num), floor_)
    return out


def miniature_model(seed: int = 0, frozen: bool = False, **kw) -> Tuple[ModelConfig, ModelParams]:
    """Two conv layers of 8 channels, GRU hidden size 4, head width 6."""
    cfg = ModelConfig.miniature(**kw)
    return cfg, ModelParams.initialize(cfg, seed, frozen=frozen)


def cohort_population() -> List[Tuple[str, Label, Optional[int]]]:
    """
    ``(patient_id, group, hy_grade)`` following the clinical cohort: 38 PD
    across grades 1-5 and 10 HP.
    """
    out: List[Tuple[str, Label, Optional[int]]] = []
    for stratum, count in HY_DISTRIBUTION.items():
        for i in range(count):
            if stratum == "HP":
                out.append((f"HP{i:02d}", Label.HP, None))
            else:
                out.append((f"{stratum}-{i:02d}", Label.PD, int(stratum[2:])))
    return out


def population_dataset(
    population: List[Tuple[str, Label, Optional[int]]],
    samples_per_patient: int = 3,
    length: int = 800,
    seed: int = 0,
) -> Dataset:
    """Dataset with random waveforms, one block of samples per patient."""
    rng = np.random.default_rng(seed)
    samples = []
    for pid, label, hy in population:
        for j in range(samples_per_patient):
            w = rng.uniform(-1, 1, length)
            samples.append(Sample(pid, label, hy, w, f"{pid}/{j}"))
    return Dataset(samples)


def constructed_votes(
    n_pd: int = 38, n_hp: int = 10, pd_missed: int = 1, hp_missed: int = 0, samples: int = 5
) -> Tuple[List[VotingResult], Dict[str, Label]]:
    """
    Patient votes where all but ``pd_missed`` PD and ``hp_missed`` HP patients
    are classified correctly.
    """
    results = []
    truth: Dict[str, Label] = {}
    for group, n, missed in ((Label.PD, n_pd, pd_missed), (Label.HP, n_hp, hp_missed)):
        other = Label.HP if group is Label.PD else Label.PD
        for i in range(n):
            pid = f"{group.name}{i:02d}"
            wrong = i < missed
            n_true = samples // 2 if wrong else samples // 2 + 1
            preds = [Prediction.from_label(group)] * n_true + [Prediction.from_label(other)] * (samples - n_true)
            results.append(vote(preds, pid))
            truth[pid] = group
    return results, truth
