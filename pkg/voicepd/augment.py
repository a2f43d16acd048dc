"""
Training-time waveform augmentations.

Four augmentations applied with independent probabilities, always in the same
order: background noise, coloured noise, time shift, polarity inversion. All
randomness comes from a caller-supplied :py:class:`numpy.random.Generator`.
"""
from __future__ import annotations

import json
import threading
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import cachetools
import numpy as np

from .audio_io import AudioClip, read_wav, resample
from .math import mean_power, round_half_up, snr_gain
from .types import SomePath

__all__ = [
    "AugmentationConfig",
    "AppliedAugmentations",
    "AugmentationSkipped",
    "add_background_noise",
    "add_colored_noise",
    "time_shift",
    "invert_polarity",
    "apply_pipeline",
    "load_noise_corpus",
    "colored_noise",
]

SNR_SANITY_RANGE = (0.0, 60.0)

Range = Tuple[float, float]


class AugmentationSkipped(ValueError):
    """Augmentation can not be applied to this input (silent clip, silent noise)."""


def _check_range(name: str, rr: Sequence[float], lo: float, hi: float) -> Range:
    if len(rr) != 2:
        raise ValueError(f"{name}: expect [low, high], got {rr!r}")
    a, b = float(rr[0]), float(rr[1])
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError(f"{name}: must be finite, got {rr!r}")
    if a > b:
        raise ValueError(f"{name}: low > high ({a} > {b})")
    if a < lo or b > hi:
        raise ValueError(f"{name}: must be within [{lo}, {hi}], got {rr!r}")
    return (a, b)


@dataclass(frozen=True)
class AugmentationConfig:
    """
    Augmentation probabilities and parameter ranges.

    Parameters are drawn uniformly from the ranges. Background noise uses its
    own SNR range, by default the same ``[3, 30]`` dB as coloured noise.
    """

    p_background: float = 0.5
    p_colored: float = 0.5
    p_shift: float = 0.5
    p_polarity: float = 0.5
    snr_db_range: Range = (3.0, 30.0)
    background_snr_db_range: Range = (3.0, 30.0)
    f_decay_range: Range = (-2.0, 2.0)
    shift_fraction_range: Range = (-0.1, 0.1)
    noise_corpus: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("p_background", "p_colored", "p_shift", "p_polarity"):
            p = float(getattr(self, name))
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}: probability must be in [0, 1], got {p}")
            object.__setattr__(self, name, p)

        _set = object.__setattr__
        _set(self, "snr_db_range", _check_range("snr_db_range", self.snr_db_range, *SNR_SANITY_RANGE))
        _set(
            self,
            "background_snr_db_range",
            _check_range("background_snr_db_range", self.background_snr_db_range, *SNR_SANITY_RANGE),
        )
        _set(self, "f_decay_range", _check_range("f_decay_range", self.f_decay_range, -np.inf, np.inf))
        _set(
            self,
            "shift_fraction_range",
            _check_range("shift_fraction_range", self.shift_fraction_range, -0.5, 0.5),
        )
        _set(self, "noise_corpus", tuple(str(p) for p in self.noise_corpus))

    @staticmethod
    def disabled() -> "AugmentationConfig":
        """All probabilities zero."""
        return AugmentationConfig(p_background=0, p_colored=0, p_shift=0, p_polarity=0)

    @property
    def is_identity(self) -> bool:
        return max(self.p_background, self.p_colored, self.p_shift, self.p_polarity) == 0

    def to_dict(self) -> Dict[str, Any]:
        dd = asdict(self)
        for k, v in dd.items():
            if isinstance(v, tuple):
                dd[k] = list(v)
        return dd

    @staticmethod
    def from_dict(dd: Dict[str, Any]) -> "AugmentationConfig":
        known = {f for f in AugmentationConfig.__dataclass_fields__}  # pylint: disable=no-member
        extra = set(dd) - known
        if extra:
            raise ValueError(f"Unknown augmentation settings: {sorted(extra)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in dd.items()}
        return AugmentationConfig(**kw)


@dataclass
class AppliedAugmentations:
    """
    What was applied to one sample in one iteration.

    Parameters are ``None`` unless the corresponding flag is set.
    """

    background: bool = False
    background_snr_db: Optional[float] = None
    noise_index: Optional[int] = None
    noise_offset: Optional[int] = None

    colored: bool = False
    colored_snr_db: Optional[float] = None
    f_decay: Optional[float] = None

    shift: bool = False
    shift_fraction: Optional[float] = None

    polarity: bool = False

    skipped: List[str] = field(default_factory=list)

    @property
    def applied(self) -> List[str]:
        return [n for n in ("background", "colored", "shift", "polarity") if getattr(self, n)]

    @property
    def is_empty(self) -> bool:
        return not self.applied and not self.skipped

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self, **extra: Any) -> str:
        """Single line JSON, ``extra`` keys go first."""
        return json.dumps({**extra, **self.to_dict()}, sort_keys=False)


def _check_finite_db(snr_db: float) -> float:
    snr_db = float(snr_db)
    if not np.isfinite(snr_db):
        raise ValueError(f"SNR must be finite, got {snr_db}")
    return snr_db


def _mix(clip: AudioClip, noise: np.ndarray, snr_db: float) -> AudioClip:
    x = clip.waveform
    p_signal = mean_power(x)
    if p_signal == 0:
        raise AugmentationSkipped("silent clip")
    p_noise = mean_power(noise)
    if p_noise == 0:
        raise AugmentationSkipped("zero-amplitude noise")
    g = snr_gain(p_signal, p_noise, snr_db)
    return clip.with_samples((x + g * noise).reshape(1, -1))


def noise_fragment(noise: np.ndarray, n: int, offset: int) -> np.ndarray:
    """
    ``n`` samples of ``noise`` starting at ``offset``, wrapping around.

    Noise shorter than ``n`` is tiled cyclically.
    """
    idx = np.arange(offset, offset + n)
    return np.take(noise, idx, mode="wrap")


def max_noise_offset(noise_len: int, n: int) -> int:
    """Largest valid fragment start (inclusive)."""
    if noise_len >= n:
        return noise_len - n
    return noise_len - 1


def add_background_noise(
    clip: AudioClip,
    noise: AudioClip,
    snr_db: float,
    rng: np.random.Generator,
    offset: Optional[int] = None,
) -> AudioClip:
    """
    Add a random fragment of a noise recording at a given SNR.

    :param offset: Fragment start, drawn uniformly from ``rng`` when not given
    :raises AugmentationSkipped: clip or noise fragment is silent
    """
    snr_db = _check_finite_db(snr_db)
    if noise.sample_rate != clip.sample_rate:
        raise ValueError(
            f"Noise sample rate {noise.sample_rate} does not match clip rate {clip.sample_rate}"
        )
    if noise.num_samples == 0:
        raise ValueError("Empty noise recording")

    n = clip.num_samples
    if offset is None:
        offset = int(rng.integers(0, max_noise_offset(noise.num_samples, n) + 1))
    frag = noise_fragment(noise.waveform, n, offset)
    return _mix(clip, frag, snr_db)


def colored_noise(n: int, f_decay: float, rng: np.random.Generator) -> np.ndarray:
    """
    Gaussian noise with power spectral density proportional to ``f**(-f_decay)``.

    White noise is shaped in the frequency domain with amplitude factor
    ``f**(-f_decay/2)``, DC bin is zeroed.
    """
    if not np.isfinite(f_decay):
        raise ValueError(f"f_decay must be finite, got {f_decay}")
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    k = np.arange(spec.shape[0], dtype="float64")
    scale = np.zeros_like(k)
    scale[1:] = k[1:] ** (-f_decay / 2.0)
    return np.fft.irfft(spec * scale, n)


def add_colored_noise(
    clip: AudioClip, snr_db: float, f_decay: float, rng: np.random.Generator
) -> AudioClip:
    """
    Add coloured noise at a given SNR.

    ``f_decay``: 0 white, 1 pink, 2 brown, negative values tilt towards high
    frequencies.

    :raises AugmentationSkipped: silent clip
    """
    snr_db = _check_finite_db(snr_db)
    if mean_power(clip.waveform) == 0:
        raise AugmentationSkipped("silent clip")
    return _mix(clip, colored_noise(clip.num_samples, f_decay, rng), snr_db)


def time_shift(clip: AudioClip, fraction: float) -> AudioClip:
    """
    Shift by ``round(fraction * length)`` samples without rollover.

    Vacated region is zero filled, length is unchanged.
    """
    if not abs(fraction) <= 0.5:
        raise ValueError(f"Shift fraction must be within [-0.5, 0.5], got {fraction}")
    x = clip.waveform
    n = x.shape[0]
    k = round_half_up(fraction * n)
    out = np.zeros_like(x)
    if k > 0:
        out[k:] = x[: n - k]
    elif k < 0:
        out[: n + k] = x[-k:]
    else:
        out[:] = x
    return clip.with_samples(out.reshape(1, -1))


def invert_polarity(clip: AudioClip) -> AudioClip:
    return clip.with_samples(-clip.samples)


def _uniform(rng: np.random.Generator, rr: Range) -> float:
    lo, hi = rr
    return float(rng.uniform(lo, hi))


def apply_pipeline(
    clip: AudioClip,
    config: AugmentationConfig,
    rng: np.random.Generator,
    noise_corpus: Optional[Sequence[AudioClip]] = None,
) -> Tuple[AudioClip, AppliedAugmentations]:
    """
    Apply all augmentations, each with its own probability.

    For every augmentation one uniform draw decides whether it applies, then
    its parameters are drawn. Degenerate inputs are recorded as skipped, not
    raised. Output is hard clamped to ``[-1, 1]``.

    :param noise_corpus: Decoded noise recordings, loaded from
                         ``config.noise_corpus`` when not supplied
    """
    if noise_corpus is None:
        noise_corpus = ()
        if config.p_background > 0 and config.noise_corpus:
            noise_corpus = load_noise_corpus(config.noise_corpus, clip.sample_rate)
    if config.p_background > 0 and len(noise_corpus) == 0:
        raise ValueError("Background noise requested but noise corpus is empty")

    rec = AppliedAugmentations()
    out = replace(clip, samples=clip.samples.copy())

    if rng.random() < config.p_background:
        snr = _uniform(rng, config.background_snr_db_range)
        idx = int(rng.integers(0, len(noise_corpus)))
        noise = noise_corpus[idx]
        offset = int(rng.integers(0, max_noise_offset(noise.num_samples, out.num_samples) + 1))
        try:
            out = add_background_noise(out, noise, snr, rng, offset=offset)
            rec.background = True
            rec.background_snr_db, rec.noise_index, rec.noise_offset = snr, idx, offset
        except AugmentationSkipped as e:
            rec.skipped.append("background")
            warnings.warn(f"Background noise skipped: {e}")

    if rng.random() < config.p_colored:
        snr = _uniform(rng, config.snr_db_range)
        f_decay = _uniform(rng, config.f_decay_range)
        try:
            out = add_colored_noise(out, snr, f_decay, rng)
            rec.colored, rec.colored_snr_db, rec.f_decay = True, snr, f_decay
        except AugmentationSkipped as e:
            rec.skipped.append("colored")
            warnings.warn(f"Coloured noise skipped: {e}")

    if rng.random() < config.p_shift:
        fraction = _uniform(rng, config.shift_fraction_range)
        out = time_shift(out, fraction)
        rec.shift, rec.shift_fraction = True, fraction

    if rng.random() < config.p_polarity:
        out = invert_polarity(out)
        rec.polarity = True

    np.clip(out.samples, -1.0, 1.0, out=out.samples)
    return out, rec


_noise_cache: cachetools.LRUCache = cachetools.LRUCache(maxsize=64)
_noise_lock = threading.Lock()


def _noise_key(path: str, sample_rate: int) -> Tuple[str, float, int]:
    pp = Path(path)
    return (str(pp.resolve()), pp.stat().st_mtime, sample_rate)


@cachetools.cached(_noise_cache, key=_noise_key, lock=_noise_lock)
def _load_noise(path: str, sample_rate: int) -> AudioClip:
    clip = read_wav(path)
    if clip.channels == 2:
        clip = AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate)
    if clip.sample_rate != sample_rate:
        clip = resample(clip, sample_rate)
    clip.samples.flags.writeable = False
    return clip


def _enumerate_wavs(src: Union[SomePath, Iterable[SomePath]]) -> List[Path]:
    if isinstance(src, (str, Path)):
        src = Path(src)
        if src.is_dir():
            return sorted(p for p in src.iterdir() if p.suffix.lower() == ".wav")
        return [src]
    paths: List[Path] = []
    for p in src:
        paths.extend(_enumerate_wavs(p))
    return paths


def load_noise_corpus(
    src: Union[SomePath, Iterable[SomePath]], sample_rate: int = 16_000
) -> Tuple[AudioClip, ...]:
    """
    Load noise recordings as mono clips at ``sample_rate``.

    Directories contribute their ``*.wav`` files in lexicographic order, so
    corpus indices are stable. Decoded recordings are cached.
    """
    return tuple(_load_noise(str(p), sample_rate) for p in _enumerate_wavs(src))
