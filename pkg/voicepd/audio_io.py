"""
Audio clips: WAV I/O and deterministic preprocessing.

All DSP runs on ``float64`` samples, quantisation to 16-bit PCM happens only
at file boundaries. The fixed preprocessing order is
``channel_subtract -> peak_normalize -> resample``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from math import gcd
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from .math import scaled_length
from .types import SomePath

__all__ = [
    "AudioClip",
    "WavFormatError",
    "UnsupportedEncodingError",
    "read_wav",
    "write_wav",
    "channel_subtract",
    "peak_normalize",
    "resample",
    "preprocess",
]

PCM_SCALE = 32768.0
TARGET_RATE = 16_000
KAISER_BETA = 8.6

#: Half-width of the resampling kernel in zero crossings of the slower rate,
#: not in taps. Each polyphase branch gets ``2 * 64 * max(up, down) / up`` taps,
#: about 353 for 44.1 kHz to 16 kHz.
ZERO_CROSSINGS = 64


class WavFormatError(ValueError):
    """Malformed or empty WAV file."""


class UnsupportedEncodingError(WavFormatError):
    """WAV file is valid but not 16-bit integer PCM with 1 or 2 channels."""


@dataclass(eq=False)
class AudioClip:
    """
    Sampled waveform.

    :param samples: ``channels x N`` float64 array
    :param sample_rate: Sampling rate in Hz
    :param silent: Set by :py:func:`peak_normalize` for all-zero input
    """

    samples: np.ndarray
    sample_rate: int
    silent: bool = field(default=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.samples, dtype="float64")
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[0] not in (1, 2):
            raise ValueError(f"Expect 1 or 2 channels, got shape {x.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"Sample rate must be positive, got {self.sample_rate}")
        self.samples = x
        self.sample_rate = int(self.sample_rate)

    @staticmethod
    def mono(x: np.ndarray, sample_rate: int) -> "AudioClip":
        return AudioClip(np.asarray(x, dtype="float64").reshape(1, -1), sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        """Duration in seconds."""
        return self.num_samples / self.sample_rate

    @property
    def waveform(self) -> np.ndarray:
        """Samples of a mono clip as a 1-d array."""
        if self.channels != 1:
            raise ValueError("Expect mono clip")
        return self.samples[0]

    @property
    def peak(self) -> float:
        if self.num_samples == 0:
            return 0.0
        return float(np.max(np.abs(self.samples)))

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return replace(self, samples=samples)

    def __repr__(self) -> str:
        return (
            f"AudioClip(channels={self.channels}, n={self.num_samples}, "
            f"rate={self.sample_rate}, silent={self.silent})"
        )


def read_wav(path: SomePath) -> AudioClip:
    """
    Load 16-bit PCM WAV file.

    Samples are scaled by ``1/32768`` into ``[-1, 1)``. Chunks other than
    ``fmt`` and ``data`` are skipped.

    :raises WavFormatError: malformed container or empty data chunk
    :raises UnsupportedEncodingError: anything but 16-bit integer PCM, 1 or 2 channels
    """
    path = Path(path)
    with warnings.catch_warnings():
        # unknown chunks are expected (LIST, bext, ...)
        warnings.simplefilter("ignore", wavfile.WavFileWarning)
        try:
            rate, data = wavfile.read(path)
        except FileNotFoundError:
            raise
        except (ValueError, EOFError, OSError) as e:
            raise WavFormatError(f"{path}: malformed WAV header ({e})") from e

    if data.dtype != np.int16:
        raise UnsupportedEncodingError(
            f"{path}: unsupported encoding {data.dtype}, expect 16-bit integer PCM"
        )
    if data.ndim == 2:
        if data.shape[1] not in (1, 2):
            raise UnsupportedEncodingError(
                f"{path}: {data.shape[1]} channels, expect 1 or 2"
            )
        data = data.T
    else:
        data = data.reshape(1, -1)

    if data.shape[1] == 0:
        raise WavFormatError(f"{path}: zero-length data chunk")

    return AudioClip(data.astype("float64") / PCM_SCALE, int(rate))


def write_wav(clip: AudioClip, path: SomePath) -> None:
    """
    Save clip as 16-bit PCM WAV.

    ``read_wav`` of the result reproduces samples within ``1/32768``.

    :raises ValueError: empty clip or samples outside ``[-1, 1]``
    """
    x = clip.samples
    if x.shape[1] == 0:
        raise ValueError("Can not write empty clip")
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1.0:
        raise ValueError("Samples must be finite and within [-1, 1]")

    pcm = np.clip(np.rint(x * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype("int16")
    wavfile.write(Path(path), clip.sample_rate, pcm.T if clip.channels > 1 else pcm[0])


def channel_subtract(clip: AudioClip) -> AudioClip:
    """
    Left minus right.

    Output may exceed ``[-1, 1]``, it is meant to be followed by
    :py:func:`peak_normalize`.
    """
    if clip.channels != 2:
        raise ValueError(f"Channel subtraction needs 2 channels, got {clip.channels}")
    left, right = clip.samples
    return AudioClip((left - right).reshape(1, -1), clip.sample_rate)


def peak_normalize(clip: AudioClip) -> AudioClip:
    """
    Scale so that peak magnitude is exactly ``1.0``.

    All-zero input passes through unchanged with ``silent=True``.
    """
    if clip.num_samples == 0:
        raise ValueError("Can not normalize empty clip")
    peak = clip.peak
    if peak == 0:
        return replace(clip, samples=clip.samples.copy(), silent=True)
    x = clip.samples / peak
    # division by the max need not land exactly on 1.0
    imax = np.unravel_index(np.argmax(np.abs(clip.samples)), x.shape)
    x[imax] = np.sign(x[imax])
    return replace(clip, samples=x, silent=False)


@lru_cache(maxsize=16)
def _sinc_kernel(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = ZERO_CROSSINGS * max_rate
    h = firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    h.flags.writeable = False
    return h


def resample_ratio(src_rate: int, dst_rate: int) -> Tuple[int, int]:
    """Reduced ``(up, down)`` factors."""
    g = gcd(src_rate, dst_rate)
    return dst_rate // g, src_rate // g


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """
    Band-limited sample rate conversion.

    Kaiser windowed sinc (``beta=8.6``, 64 zero crossings per side) applied in
    polyphase form. Output length is ``round(n * target_rate / sample_rate)``.
    """
    if target_rate <= 0:
        raise ValueError(f"Target rate must be positive, got {target_rate}")
    if clip.channels != 1:
        raise ValueError("Resampling expects mono clip")
    n = clip.num_samples
    if n == 0:
        raise ValueError("Can not resample empty clip")

    if target_rate == clip.sample_rate:
        return replace(clip, samples=clip.samples.copy())

    up, down = resample_ratio(clip.sample_rate, target_rate)
    n_out = scaled_length(n, target_rate, clip.sample_rate)
    y = resample_poly(
        clip.samples[0],
        up,
        down,
        window=np.array(_sinc_kernel(up, down)),
        padtype="mean",
    )
    y = y[:n_out]
    if y.shape[0] < n_out:
        y = np.pad(y, (0, n_out - y.shape[0]), mode="edge")
    return replace(clip, samples=y.reshape(1, -1), sample_rate=int(target_rate))


def preprocess(clip: AudioClip, target_rate: int = TARGET_RATE, warn_mono: bool = True) -> AudioClip:
    """
    Fixed preprocessing chain: subtract, normalise, resample.

    Mono input skips channel subtraction with a warning. Silent clips are
    flagged, not rejected.

    :param warn_mono: Emit the mono warning, bulk loaders turn it off
    """
    if clip.channels == 2:
        clip = channel_subtract(clip)
    elif warn_mono:
        warnings.warn("Mono input: skipping channel subtraction")

    clip = peak_normalize(clip)
    silent = clip.silent
    if silent:
        warnings.warn("Silent clip after normalisation")

    clip = resample(clip, target_rate)
    if clip.num_samples > 0:
        # resampling ripple can overshoot full scale by a hair
        np.clip(clip.samples, -1.0, 1.0, out=clip.samples)
    return replace(clip, silent=silent)
