"""
SVG figures.

Plain text output built from f-strings, coordinates printed with fixed
precision so identical inputs give identical bytes.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ._output import Provenance
from .features import FeatureMap
from .math import quasi_random_r2
from .types import SomePath

# pylint: disable=too-many-locals,too-many-arguments

__all__ = [
    "voting_svg",
    "featuremap_svg",
    "waveform_svg",
    "loss_svg",
    "save_svg",
]

_FONT = 'font-family="sans-serif" font-size="11"'
_PD_COLOR = "#c0392b"
_HP_COLOR = "#2471a3"
MAX_TRACE_POINTS = 2000
MAX_HEATMAP_ROWS = 128


def _f(v: float) -> str:
    return f"{v:.2f}"


def pick_grid_step(N: int, at_least: int = 4, no_more: int = 11) -> int:
    if N <= 0:
        return 1

    factors = [1, 5, 10, 2, 4, 3, 6, 7, 8, 9, 1.5, 2.5]
    n = 10 ** (math.floor(math.log10(N)) - 1)
    if n < 1:
        return 1

    for f in factors:
        step = int(n * f)
        count = N // step
        if at_least <= count < no_more:
            return step

    return N // at_least


def _wrap(body: str, w: int, h: int, prov: Optional[Provenance]) -> str:
    comment = "" if prov is None else f"<!-- {prov.comment()} -->\n"
    return f"""\
<?xml version="1.0" encoding="utf-8"?>
{comment}<svg xmlns="http://www.w3.org/2000/svg"
     width="{w:d}" height="{h:d}"
     viewBox="0 0 {w:d} {h:d}">
<rect width="{w:d}" height="{h:d}" fill="white"/>
{body}</svg>
"""


def _polyline(xs: Sequence[float], ys: Sequence[float], stroke: str, width: float = 1.0) -> str:
    pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{stroke}" stroke-width="{width}" points="{pts}"/>\n'


def _text(x: float, y: float, txt: str, anchor: str = "middle") -> str:
    return f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" {_FONT}>{txt}</text>\n'


def _stratum(group: str, hy: object) -> str:
    if str(group).upper() == "HP":
        return "HP"
    if hy is None or (isinstance(hy, float) and math.isnan(hy)) or hy is pd.NA:
        return "PD"
    return f"HY{int(hy)}"  # type: ignore[call-overload]


def voting_svg(votes: pd.DataFrame, prov: Optional[Provenance] = None, width: int = 480, height: int = 320) -> str:
    """
    Voting certainty per patient, one column per stratum (HP, then H-Y grades).

    Needs columns ``group``, ``hy_grade`` and ``certainty``. A dotted line
    marks the 0.5 decision threshold.

    :raises ValueError: no rows
    """
    if votes.shape[0] == 0:
        raise ValueError("No voting rows to plot")
    for col in ("group", "hy_grade", "certainty"):
        if col not in votes.columns:
            raise ValueError(f"Voting table lacks column {col!r}")

    strata = [_stratum(g, h) for g, h in zip(votes["group"], votes["hy_grade"])]
    cols = sorted(set(strata), key=lambda s: (s != "HP", s))
    left, right, top, bottom = 40, 10, 10, 30
    pw, ph = width - left - right, height - top - bottom
    cw = pw / len(cols)

    def yy(c: float) -> float:
        return top + (1 - c) * ph

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#555555"/>\n']
    for c in (0.0, 0.25, 0.5, 0.75, 1.0):
        body.append(_text(left - 4, yy(c) + 4, f"{c:.2f}", anchor="end"))
    body.append(
        f'<line x1="{left}" x2="{left + pw}" y1="{_f(yy(0.5))}" y2="{_f(yy(0.5))}"'
        ' stroke="#555555" stroke-dasharray="2,3"/>\n'
    )

    jitter = quasi_random_r2(len(strata))[:, 0]
    for i, (s, c) in enumerate(zip(strata, votes["certainty"])):
        k = cols.index(s)
        x = left + (k + 0.25 + 0.5 * jitter[i]) * cw
        color = _HP_COLOR if s == "HP" else _PD_COLOR
        body.append(f'<circle cx="{_f(x)}" cy="{_f(yy(float(c)))}" r="3" fill="{color}"/>\n')
    for k, s in enumerate(cols):
        body.append(_text(left + (k + 0.5) * cw, height - 10, s))

    return _wrap("".join(body), width, height, prov)


def _downsample_rows(img: np.ndarray, max_rows: int) -> np.ndarray:
    rows = img.shape[0]
    if rows <= max_rows:
        return img
    edges = np.linspace(0, rows, max_rows + 1).astype(int)
    return np.stack([img[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])])


def _color(v: float) -> str:
    # dark blue to yellow
    r = int(round(30 + v * 223))
    g = int(round(20 + v * 211))
    b = int(round(90 - v * 60))
    return f"#{r:02x}{g:02x}{b:02x}"


def _heatmap(img: np.ndarray, x0: float, y0: float, w: float, h: float) -> str:
    """``img`` is ``rows x cols``, row 0 drawn at the bottom."""
    lo, hi = float(np.min(img)), float(np.max(img))
    span = hi - lo if hi > lo else 1.0
    nr, nc = img.shape
    cw, rh = w / nc, h / nr
    out = []
    for i in range(nr):
        y = y0 + h - (i + 1) * rh
        for j in range(nc):
            v = (float(img[i, j]) - lo) / span
            out.append(
                f'<rect x="{_f(x0 + j * cw)}" y="{_f(y)}" width="{_f(cw + 0.05)}"'
                f' height="{_f(rh + 0.05)}" fill="{_color(v)}"/>\n'
            )
    out.append(f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="#555555"/>\n')
    return "".join(out)


def featuremap_svg(
    spectrogram: np.ndarray,
    fmap: FeatureMap,
    duration: float,
    spec_duration: Optional[float] = None,
    prov: Optional[Provenance] = None,
    panel_width: int = 320,
    panel_height: int = 240,
) -> str:
    """
    Log-magnitude spectrogram (left) next to a feature map (right).

    Both panels map the clip duration to the same width.

    :param spectrogram: ``time x frequency`` magnitudes
    :param fmap: ``frames x channels``
    :param duration: Clip duration in seconds
    :param spec_duration: Time covered by the spectrogram frames, defaults to ``duration``
    """
    if spectrogram.ndim != 2 or spectrogram.size == 0:
        raise ValueError("Spectrogram must be a non-empty 2-d array")
    if duration <= 0:
        raise ValueError(f"Duration must be positive, got {duration}")

    spec_img = _downsample_rows(np.log10(spectrogram.T + 1e-9), MAX_HEATMAP_ROWS)
    fmap_img = _downsample_rows(fmap.values.T, MAX_HEATMAP_ROWS)

    pad, gap, label_h = 10, 20, 20
    width = 2 * panel_width + gap + 2 * pad
    height = panel_height + label_h + 2 * pad

    frac_spec = min(1.0, (spec_duration or duration) / duration)
    frac_fmap = min(1.0, fmap.frames / fmap.frame_rate / duration)

    x1 = pad + panel_width + gap
    body = [
        _heatmap(spec_img, pad, pad, panel_width * frac_spec, panel_height),
        _heatmap(fmap_img, x1, pad, panel_width * frac_fmap, panel_height),
        _text(pad + panel_width / 2, height - pad, "spectrogram"),
        _text(x1 + panel_width / 2, height - pad, f"feature map ({fmap.channels} channels)"),
    ]
    return _wrap("".join(body), width, height, prov)


def _envelope_trace(x: np.ndarray, max_points: int) -> Tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    if n <= max_points:
        return np.arange(n, dtype="float64"), x
    nb = max_points // 2
    edges = np.linspace(0, n, nb + 1).astype(int)
    idx: List[float] = []
    val: List[float] = []
    for a, b in zip(edges[:-1], edges[1:]):
        seg = x[a:b]
        idx.extend((a, b - 1))
        val.extend((float(seg.min()), float(seg.max())))
    return np.asarray(idx, dtype="float64"), np.asarray(val)


def waveform_svg(
    before: np.ndarray,
    after: np.ndarray,
    sample_rate: int,
    prov: Optional[Provenance] = None,
    width: int = 640,
    trace_height: int = 120,
) -> str:
    """Two stacked waveform traces on a shared ``[-1, 1]`` scale."""
    pad, label_h = 10, 16
    height = 2 * (trace_height + label_h) + 3 * pad
    n_max = max(before.shape[0], after.shape[0], 1)

    body = []
    for k, (name, x) in enumerate((("before", before), ("after", after))):
        y0 = pad + k * (trace_height + label_h + pad) + label_h
        xs, ys = _envelope_trace(np.asarray(x, dtype="float64").ravel(), MAX_TRACE_POINTS)
        px = pad + xs / n_max * (width - 2 * pad)
        py = y0 + (1 - np.clip(ys, -1, 1)) / 2 * trace_height
        body.append(_text(pad, y0 - 4, f"{name} ({x.shape[0] / sample_rate:.2f} s)", anchor="start"))
        body.append(
            f'<line x1="{pad}" x2="{width - pad}" y1="{_f(y0 + trace_height / 2)}"'
            f' y2="{_f(y0 + trace_height / 2)}" stroke="#cccccc"/>\n'
        )
        if xs.shape[0] > 0:
            body.append(_polyline(px, py, "#333333", 0.5))
    return _wrap("".join(body), width, height, prov)


def loss_svg(losses: Sequence[float], prov: Optional[Provenance] = None, width: int = 480, height: int = 280) -> str:
    """Training loss per epoch."""
    if len(losses) == 0:
        raise ValueError("No losses to plot")
    yv = np.asarray(losses, dtype="float64")
    left, right, top, bottom = 50, 10, 10, 30
    pw, ph = width - left - right, height - top - bottom
    hi = float(np.max(yv)) if np.max(yv) > 0 else 1.0
    n = yv.shape[0]
    xs = left + (np.arange(n) / max(n - 1, 1)) * pw
    ys = top + (1 - yv / hi) * ph

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#555555"/>\n']
    step = pick_grid_step(n)
    for e in range(0, n, step):
        body.append(_text(left + e / max(n - 1, 1) * pw, height - 10, str(e + 1)))
    body.append(_text(left - 4, top + 4, f"{hi:.3g}", anchor="end"))
    body.append(_text(left - 4, top + ph, "0", anchor="end"))
    body.append(_polyline(xs, ys, _PD_COLOR, 1.5))
    return _wrap("".join(body), width, height, prov)


def save_svg(svg: str, path: SomePath) -> Path:
    path = Path(path)
    path.write_text(svg, encoding="utf8")
    return path
