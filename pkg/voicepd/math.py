"""
Various mathy helpers.

Minimal dependencies in this module.
"""
from __future__ import annotations

import hashlib
import json
from math import floor, isfinite
from typing import Any, Mapping, Sequence, Tuple

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def round_half_up(x: float) -> int:
    """Round to nearest integer, ``.5`` goes up (unlike builtin ``round``)."""
    return int(floor(x + 0.5))


def scaled_length(n: int, num: int, den: int) -> int:
    """
    Compute ``round(n * num / den)`` in exact integer arithmetic.

    Ties are rounded up.
    """
    assert den > 0
    return (2 * n * num + den) // (2 * den)


def conv_out_length(n: int, kernel: int, stride: int) -> int:
    """
    Output length of a valid (no padding) strided 1-d convolution.

    :return: ``floor((n - kernel)/stride) + 1``, or ``0`` when ``n < kernel``
    """
    if n < kernel:
        return 0
    return (n - kernel) // stride + 1


def mean_power(x: np.ndarray) -> float:
    """Mean squared amplitude."""
    if x.size == 0:
        return 0.0
    return float(np.mean(np.square(x, dtype="float64")))


def snr_gain(p_signal: float, p_noise: float, snr_db: float) -> float:
    """
    Amplitude scale for noise of power ``p_noise``.

    Scaled noise satisfies ``10*log10(p_signal / (g**2 * p_noise)) == snr_db``.
    """
    if not isfinite(snr_db):
        raise ValueError(f"SNR must be finite, got {snr_db}")
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype="float64")
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf based) GELU."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of :py:func:`gelu`: ``Phi(x) + x*phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the last axis using log-sum-exp stabilisation."""
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    return np.exp(log_softmax(logits))


def rel_error(a: np.ndarray, b: np.ndarray, floor_: float = 1e-8) -> float:
    """
    Max element-wise relative error ``|a-b| / max(|a|, |b|, floor_)``.
    """
    a = np.asarray(a, dtype="float64")
    b = np.asarray(b, dtype="float64")
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor_)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / den))


def global_norm(arrays: Mapping[str, np.ndarray]) -> float:
    """L2 norm across all arrays of a gradient set."""
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays.values())))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Independent generator for ``(seed, *keys)``.

    Used to give each ``(sample, epoch)`` or ``(patient,)`` its own stream so
    that results do not depend on processing order.
    """
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def config_hash(cfg: Mapping[str, Any]) -> str:
    """Stable short hash of a JSON-able config mapping."""
    txt = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(txt.encode("utf8")).hexdigest()[:12]


def array_fingerprint(arrays: Sequence[np.ndarray]) -> str:
    """Content hash of a sequence of arrays (shape and bytes)."""
    h = hashlib.sha1()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="float64")
        h.update(repr(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


def quasi_random_r2(n: int, offset: int = 0) -> np.ndarray:
    """
    Generate quasi-random set of points in ``[0, 1)^2``.

    Deterministic, evenly spread; used for plot jitter.

    References: http://extremelearning.com.au/unreasonable-effectiveness-of-quasirandom-sequences/
    """
    idx = np.arange(offset, offset + n, dtype="float64")
    aa = (0.7548776662466927, 0.5698402909980532)
    return np.fmod(np.outer(idx, aa), 1)


def split_even(n: int, parts: int) -> Tuple[Tuple[int, int], ...]:
    """
    Split ``range(n)`` into ``parts`` contiguous ``(start, stop)`` ranges.

    Sizes differ by at most one, empty ranges are dropped.
    """
    parts = max(1, min(parts, n)) if n > 0 else 1
    base, extra = divmod(n, parts)
    out = []
    start = 0
    for i in range(parts):
        sz = base + (1 if i < extra else 0)
        if sz > 0:
            out.append((start, start + sz))
        start += sz
    return tuple(out)
