"""
Sequence-to-one classifier.

Conv feature encoder, bidirectional single layer GRU read out at the final
state of each direction, and an MLP head with two ReLU hidden layers. Forward
and backward passes are exact and batched over equal-length inputs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._container import WeightFileError, pack_arrays, read_chunks, unpack_arrays, write_chunks
from ._version import __version__
from .features import (
    ConvCache,
    ConvStackConfig,
    ConvStackParams,
    FeatureMap,
    FrozenParamsError,
    conv_backward,
    conv_forward_batch,
    weights_from_bytes,
    weights_to_bytes,
)
from .math import derive_rng, sigmoid, softmax
from .types import Label, SomePath

__all__ = [
    "ModelConfig",
    "GruParams",
    "HeadParams",
    "ModelParams",
    "Prediction",
    "gru_forward",
    "gru_backward",
    "head_forward",
    "head_forward_batch",
    "head_backward",
    "model_forward",
    "model_forward_train",
    "model_backward",
    "predict_batch",
    "save_checkpoint",
    "load_checkpoint",
]

_LOG = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VPDM"
CHECKPOINT_VERSION = 1
NUM_CLASSES = 2
GATES = 3  # update, reset, candidate


@dataclass(frozen=True)
class ModelConfig:
    """
    Network shape.

    Default is the full size model: 512 conv channels, GRU hidden size 256,
    head width 128.
    """

    conv: ConvStackConfig = field(default_factory=ConvStackConfig.wav2vec2_base)
    hidden_size: int = 256
    head_hidden: int = 128
    sample_rate: int = 16_000

    def __post_init__(self) -> None:
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be positive, got {self.hidden_size}")
        if self.head_hidden < 1:
            raise ValueError(f"head_hidden must be positive, got {self.head_hidden}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @staticmethod
    def default() -> "ModelConfig":
        return ModelConfig()

    @staticmethod
    def miniature(
        conv_channels: int = 8, hidden_size: int = 4, head_hidden: int = 6, conv_layers: int = 2
    ) -> "ModelConfig":
        return ModelConfig(
            conv=ConvStackConfig.miniature(conv_channels, conv_layers),
            hidden_size=hidden_size,
            head_hidden=head_hidden,
        )

    @staticmethod
    def scaled(conv_channels: int = 512, hidden_size: int = 256, head_hidden: int = 128) -> "ModelConfig":
        """Full depth conv stack at a given width."""
        return ModelConfig(
            conv=ConvStackConfig.wav2vec2_base(conv_channels),
            hidden_size=hidden_size,
            head_hidden=head_hidden,
        )

    @property
    def conv_channels(self) -> int:
        return self.conv.out_channels

    @property
    def min_samples(self) -> int:
        return self.conv.receptive_field

    def to_dict(self) -> Dict[str, Any]:
        return {
            "conv": self.conv.to_dict(),
            "hidden_size": self.hidden_size,
            "head_hidden": self.head_hidden,
            "sample_rate": self.sample_rate,
        }

    @staticmethod
    def from_dict(dd: Dict[str, Any]) -> "ModelConfig":
        dd = dict(dd)
        if "conv" in dd:
            dd["conv"] = ConvStackConfig.from_dict(dd["conv"])
        elif "conv_channels" in dd:
            dd["conv"] = ConvStackConfig.wav2vec2_base(int(dd.pop("conv_channels")))
        return ModelConfig(**dd)


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class GruParams:
    """
    Bidirectional GRU tensors.

    Per direction (``fwd``/``bwd``) gate tensors are stacked in order update,
    reset, candidate: ``w_x`` is ``3 x H x D``, ``w_h`` is ``3 x H x H``,
    ``b`` is ``3 x H``. Initial hidden state is zero.
    """

    arrays: Dict[str, np.ndarray]

    @staticmethod
    def initialize(input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        arrays = {}
        for d in ("fwd", "bwd"):
            arrays[f"gru.{d}.w_x"] = _uniform(rng, input_size, (GATES, hidden_size, input_size))
            arrays[f"gru.{d}.w_h"] = _uniform(rng, hidden_size, (GATES, hidden_size, hidden_size))
            arrays[f"gru.{d}.b"] = _uniform(rng, hidden_size, (GATES, hidden_size))
        return GruParams(arrays)

    @property
    def hidden_size(self) -> int:
        return self.arrays["gru.fwd.w_h"].shape[1]

    @property
    def input_size(self) -> int:
        return self.arrays["gru.fwd.w_x"].shape[2]

    def direction(self, d: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.arrays[f"gru.{d}.w_x"], self.arrays[f"gru.{d}.w_h"], self.arrays[f"gru.{d}.b"]


@dataclass(eq=False)
class HeadParams:
    """Three affine layers, ``w{i}`` is ``out x in``; hidden activation is ReLU."""

    arrays: Dict[str, np.ndarray]
    activation: str = "relu"

    @staticmethod
    def initialize(input_size: int, hidden: int, rng: np.random.Generator) -> "HeadParams":
        sizes = [(hidden, input_size), (hidden, hidden), (NUM_CLASSES, hidden)]
        arrays = {}
        for i, (n_out, n_in) in enumerate(sizes, start=1):
            arrays[f"head.w{i}"] = _uniform(rng, n_in, (n_out, n_in))
            arrays[f"head.b{i}"] = _uniform(rng, n_in, (n_out,))
        return HeadParams(arrays)

    @staticmethod
    def zeros(input_size: int, hidden: int) -> "HeadParams":
        sizes = [(hidden, input_size), (hidden, hidden), (NUM_CLASSES, hidden)]
        arrays = {}
        for i, (n_out, n_in) in enumerate(sizes, start=1):
            arrays[f"head.w{i}"] = np.zeros((n_out, n_in))
            arrays[f"head.b{i}"] = np.zeros(n_out)
        return HeadParams(arrays)

    def layer(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.arrays[f"head.w{i}"], self.arrays[f"head.b{i}"]


@dataclass(eq=False)
class ModelParams:
    """All tensors of conv stack, GRU and head."""

    conv: ConvStackParams
    gru: GruParams
    head: HeadParams

    @staticmethod
    def initialize(
        config: ModelConfig,
        seed: int = 0,
        conv: Optional[ConvStackParams] = None,
        frozen: bool = False,
    ) -> "ModelParams":
        """
        Random parameters from ``seed``.

        Conv, GRU and head draw from separate streams, so supplying pretrained
        ``conv`` leaves GRU and head initialisation unchanged. Supplied ``conv``
        is copied.
        """
        if conv is None:
            conv = ConvStackParams.initialize(config.conv, derive_rng(seed, 0), frozen=frozen)
        else:
            conv.check(config.conv)
            conv = conv.copy(frozen=frozen)
        gru = GruParams.initialize(config.conv_channels, config.hidden_size, derive_rng(seed, 1))
        head = HeadParams.initialize(2 * config.hidden_size, config.head_hidden, derive_rng(seed, 2))
        return ModelParams(conv, gru, head)

    @property
    def conv_frozen(self) -> bool:
        return self.conv.frozen

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {**self.conv.named_arrays(), **self.gru.arrays, **self.head.arrays}

    def trainable_arrays(self) -> Dict[str, np.ndarray]:
        """Live arrays an optimizer may update; conv tensors excluded when frozen."""
        out: Dict[str, np.ndarray] = {}
        if not self.conv.frozen:
            out.update(self.conv.trainable_arrays())
        out.update(self.gru.arrays)
        out.update(self.head.arrays)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.conv.copy(),
            GruParams({k: v.copy() for k, v in self.gru.arrays.items()}),
            HeadParams({k: v.copy() for k, v in self.head.arrays.items()}, self.head.activation),
        )

    def check(self, config: ModelConfig) -> None:
        self.conv.check(config.conv)
        if self.gru.input_size != config.conv_channels or self.gru.hidden_size != config.hidden_size:
            raise ValueError(
                f"GRU shape ({self.gru.input_size}, {self.gru.hidden_size}) does not match "
                f"config ({config.conv_channels}, {config.hidden_size})"
            )
        w1, _ = self.head.layer(1)
        if w1.shape != (config.head_hidden, 2 * config.hidden_size):
            raise ValueError(f"Head input layer shape {w1.shape} does not match config")


@dataclass(frozen=True, eq=False)
class Prediction:
    """
    Per-sample classifier output.

    ``label`` is the argmax of the logits, equal logits give PD.
    """

    logits: np.ndarray
    probability_pd: float
    label: Label

    @staticmethod
    def from_logits(logits: np.ndarray) -> "Prediction":
        logits = np.asarray(logits, dtype="float64").reshape(NUM_CLASSES)
        p = softmax(logits)
        label = Label.PD if logits[Label.PD] >= logits[Label.HP] else Label.HP
        return Prediction(logits, float(p[Label.PD]), label)

    @staticmethod
    def from_label(label: Union[Label, str]) -> "Prediction":
        """Prediction with unit-margin logits, handy for building vote fixtures."""
        label = Label.parse(label)
        logits = np.zeros(NUM_CLASSES)
        logits[label] = 1.0
        return Prediction.from_logits(logits)


#
# GRU
#


@dataclass(eq=False)
class GruCache:
    x: np.ndarray
    steps: Dict[str, List[Tuple[np.ndarray, ...]]]


def _gru_direction(xp: np.ndarray, w_h: np.ndarray, b: np.ndarray, keep: bool):
    """
    Run recurrence over pre-projected inputs ``xp`` (``B x T x 3 x H``).
    """
    bsz, n_t, _, hsz = xp.shape
    h = np.zeros((bsz, hsz))
    steps = []
    for t in range(n_t):
        a = xp[:, t] + b
        z = sigmoid(a[:, 0] + h @ w_h[0].T)
        r = sigmoid(a[:, 1] + h @ w_h[1].T)
        rh = r * h
        n = np.tanh(a[:, 2] + rh @ w_h[2].T)
        if keep:
            steps.append((h, z, r, rh, n))
        h = (1.0 - z) * h + z * n
    return h, steps


def gru_forward(
    features: Union[FeatureMap, np.ndarray], params: GruParams, training: bool = False
) -> Tuple[np.ndarray, Optional[GruCache]]:
    """
    Final states of both directions, concatenated.

    :param features: ``T x D`` feature map, or ``B x T x D`` batch
    :return: ``2H`` vector (``B x 2H`` for a batch), forward half first
    """
    x = features.values if isinstance(features, FeatureMap) else np.asarray(features, dtype="float64")
    single = x.ndim == 2
    if single:
        x = x[np.newaxis]
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError(f"GRU needs at least one frame, got shape {x.shape}")
    if x.shape[2] != params.input_size:
        raise ValueError(f"Feature width {x.shape[2]} does not match GRU input size {params.input_size}")

    outs = []
    steps = {}
    for d, xs in (("fwd", x), ("bwd", x[:, ::-1])):
        w_x, w_h, b = params.direction(d)
        xp = np.einsum("btd,ghd->btgh", xs, w_x)
        h, st = _gru_direction(xp, w_h, b, training)
        outs.append(h)
        steps[d] = st

    hidden = np.concatenate(outs, axis=1)
    cache = GruCache(x, steps) if training else None
    return (hidden[0] if single else hidden), cache


def gru_backward(
    grad_hidden: np.ndarray, cache: Optional[GruCache], params: GruParams
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Backpropagation through time.

    :return: Gradient w.r.t. the feature map and named GRU parameter gradients
    """
    if cache is None:
        raise ValueError("gru_backward needs the cache of a training-mode forward pass")
    g = np.asarray(grad_hidden, dtype="float64")
    single = g.ndim == 1
    if single:
        g = g[np.newaxis]
    hsz = params.hidden_size
    x = cache.x
    bsz, n_t, _ = x.shape

    grads: Dict[str, np.ndarray] = {}
    dx = np.zeros_like(x)
    for k, d in enumerate(("fwd", "bwd")):
        w_x, w_h, _ = params.direction(d)
        dh = g[:, k * hsz : (k + 1) * hsz].copy()
        dw_h = np.zeros_like(w_h)
        da_all = np.zeros((bsz, n_t, GATES, hsz))
        for t in reversed(range(n_t)):
            h_prev, z, r, rh, n = cache.steps[d][t]
            da_n = dh * z * (1.0 - n * n)
            da_z = dh * (n - h_prev) * z * (1.0 - z)
            dh_prev = dh * (1.0 - z)

            dw_h[2] += da_n.T @ rh
            drh = da_n @ w_h[2]
            da_r = drh * h_prev * r * (1.0 - r)
            dh_prev += drh * r

            dw_h[0] += da_z.T @ h_prev
            dw_h[1] += da_r.T @ h_prev
            dh_prev += da_z @ w_h[0] + da_r @ w_h[1]

            da_all[:, t, 0] = da_z
            da_all[:, t, 1] = da_r
            da_all[:, t, 2] = da_n
            dh = dh_prev

        xs = x if d == "fwd" else x[:, ::-1]
        grads[f"gru.{d}.w_x"] = np.einsum("btgh,btd->ghd", da_all, xs)
        grads[f"gru.{d}.w_h"] = dw_h
        grads[f"gru.{d}.b"] = da_all.sum(axis=(0, 1))
        dxs = np.einsum("btgh,ghd->btd", da_all, w_x)
        dx += dxs if d == "fwd" else dxs[:, ::-1]

    return (dx[0] if single else dx), grads


#
# Head
#


@dataclass(eq=False)
class HeadCache:
    h0: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray


def head_forward_batch(hidden: np.ndarray, params: HeadParams) -> Tuple[np.ndarray, HeadCache]:
    """``B x 2H`` hidden states to ``B x 2`` logits."""
    h0 = np.asarray(hidden, dtype="float64")
    w1, b1 = params.layer(1)
    if h0.ndim != 2 or h0.shape[1] != w1.shape[1]:
        raise ValueError(f"Head expects B x {w1.shape[1]} input, got shape {h0.shape}")
    w2, b2 = params.layer(2)
    w3, b3 = params.layer(3)
    a1 = h0 @ w1.T + b1
    h1 = np.maximum(a1, 0)
    a2 = h1 @ w2.T + b2
    h2 = np.maximum(a2, 0)
    logits = h2 @ w3.T + b3
    return logits, HeadCache(h0, a1, h1, a2, h2)


def head_forward(hidden: np.ndarray, params: HeadParams) -> Tuple[Prediction, HeadCache]:
    """
    Classify one final hidden state.

    :raises ValueError: shape mismatch
    """
    hidden = np.asarray(hidden, dtype="float64")
    if hidden.ndim != 1:
        raise ValueError(f"Expect a hidden vector, got shape {hidden.shape}")
    logits, cache = head_forward_batch(hidden[np.newaxis], params)
    return Prediction.from_logits(logits[0]), cache


def head_backward(
    grad_logits: np.ndarray, cache: HeadCache, params: HeadParams
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    g = np.asarray(grad_logits, dtype="float64")
    single = g.ndim == 1
    if single:
        g = g[np.newaxis]
    w1, _ = params.layer(1)
    w2, _ = params.layer(2)
    w3, _ = params.layer(3)

    grads = {"head.w3": g.T @ cache.h2, "head.b3": g.sum(axis=0)}
    g = (g @ w3) * (cache.a2 > 0)
    grads["head.w2"] = g.T @ cache.h1
    grads["head.b2"] = g.sum(axis=0)
    g = (g @ w2) * (cache.a1 > 0)
    grads["head.w1"] = g.T @ cache.h0
    grads["head.b1"] = g.sum(axis=0)
    dh = g @ w1
    return (dh[0] if single else dh), grads


#
# Whole model
#


@dataclass(eq=False)
class ModelCache:
    conv: Optional[ConvCache]
    gru: GruCache
    head: HeadCache


def _as_batch(waveforms: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    x = np.asarray(waveforms, dtype="float64")
    if x.ndim == 1:
        x = x[np.newaxis]
    return x


def model_forward_train(
    waveforms: Optional[np.ndarray],
    params: ModelParams,
    config: ModelConfig,
    features: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, ModelCache]:
    """
    Training-mode forward over equal-length waveforms.

    :param features: Precomputed ``B x F x C`` conv output (frozen stack only),
                     skips the conv forward pass
    :return: ``B x 2`` logits and the cache for :py:func:`model_backward`
    """
    conv_cache = None
    if features is None:
        if waveforms is None:
            raise ValueError("Need either waveforms or features")
        feats, conv_cache = conv_forward_batch(
            _as_batch(waveforms), params.conv, config.conv, training=not params.conv.frozen
        )
    else:
        if not params.conv.frozen:
            raise ValueError("Precomputed features require a frozen conv stack")
        feats = np.asarray(features, dtype="float64")
    hidden, gru_cache = gru_forward(feats, params.gru, training=True)
    logits, head_cache = head_forward_batch(hidden, params.head)
    assert gru_cache is not None
    return logits, ModelCache(conv_cache, gru_cache, head_cache)


def model_backward(
    grad_logits: np.ndarray, cache: ModelCache, params: ModelParams, config: ModelConfig
) -> Dict[str, np.ndarray]:
    """
    Gradients of all trainable tensors.

    Conv tensors are absent from the result when the stack is frozen.
    """
    dh, grads = head_backward(grad_logits, cache.head, params.head)
    dfeat, g_gru = gru_backward(dh, cache.gru, params.gru)
    grads.update(g_gru)
    if not params.conv.frozen:
        _, g_conv = conv_backward(dfeat, cache.conv, params.conv, config.conv)
        if g_conv is None:
            raise FrozenParamsError("Conv stack froze during a training step")
        grads.update(g_conv)
    return grads


def model_forward(waveform: np.ndarray, params: ModelParams, config: ModelConfig) -> Prediction:
    """Conv stack, GRU and head for one waveform."""
    return predict_batch([waveform], params, config)[0]


def predict_features(features: np.ndarray, params: ModelParams) -> List[Prediction]:
    """Predictions from ``B x F x C`` precomputed conv output."""
    hidden, _ = gru_forward(np.asarray(features, dtype="float64"), params.gru)
    logits, _ = head_forward_batch(np.atleast_2d(hidden), params.head)
    return [Prediction.from_logits(row) for row in logits]


def predict_batch(
    waveforms: Sequence[np.ndarray], params: ModelParams, config: ModelConfig
) -> List[Prediction]:
    """
    Predictions in input order.

    Equal-length inputs are stacked and processed together, results equal
    one-by-one evaluation.
    """
    out: List[Optional[Prediction]] = [None] * len(waveforms)
    by_len: Dict[int, List[int]] = {}
    for i, w in enumerate(waveforms):
        by_len.setdefault(int(np.asarray(w).shape[-1]), []).append(i)

    for idx in by_len.values():
        batch = np.stack([np.asarray(waveforms[i], dtype="float64").ravel() for i in idx])
        feats, _ = conv_forward_batch(batch, params.conv, config.conv)
        for i, p in zip(idx, predict_features(feats, params)):
            out[i] = p
    return [p for p in out if p is not None]


#
# Checkpoints
#


def save_checkpoint(
    params: ModelParams,
    config: ModelConfig,
    path: SomePath,
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    """
    Write ``VPDM`` container: JSON header, conv weights, GRU and head tensors.
    """
    header = {
        "version": __version__,
        "model": config.to_dict(),
        "conv_frozen": params.conv.frozen,
        "conv_pretrained": params.conv.pretrained,
        "gru": sorted(params.gru.arrays),
        "head": sorted(params.head.arrays),
        "meta": meta or {},
    }
    chunks = [
        (b"JSON", json.dumps(header, sort_keys=True).encode("utf8")),
        (b"CONV", weights_to_bytes(params.conv)),
        (b"GRU_", pack_arrays([params.gru.arrays[k] for k in header["gru"]])),
        (b"HEAD", pack_arrays([params.head.arrays[k] for k in header["head"]])),
    ]
    buf = BytesIO()
    write_chunks(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, chunks)
    Path(path).write_bytes(buf.getvalue())
    _LOG.info("Saved checkpoint %s", path)


def load_checkpoint(path: SomePath) -> Tuple[ModelParams, ModelConfig, Dict[str, Any]]:
    """
    Read a checkpoint written by :py:func:`save_checkpoint`.

    :return: ``(params, config, meta)``
    :raises WeightFileError: bad magic, missing chunk, shape mismatch, truncation
    """
    chunks = read_chunks(BytesIO(Path(path).read_bytes()), CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    for tag in (b"JSON", b"CONV", b"GRU_", b"HEAD"):
        if tag not in chunks:
            raise WeightFileError(f"Checkpoint is missing chunk {tag!r}")

    header = json.loads(chunks[b"JSON"].decode("utf8"))
    config = ModelConfig.from_dict(header["model"])
    conv = weights_from_bytes(
        chunks[b"CONV"],
        config.conv,
        frozen=bool(header.get("conv_frozen")),
        pretrained=bool(header.get("conv_pretrained")),
    )

    def _named(keys: List[str], payload: bytes, what: str) -> Dict[str, np.ndarray]:
        arrays = unpack_arrays(payload, what)
        if len(arrays) != len(keys):
            raise WeightFileError(f"{what}: expected {len(keys)} tensors, got {len(arrays)}")
        return dict(zip(keys, arrays))

    params = ModelParams(
        conv,
        GruParams(_named(header["gru"], chunks[b"GRU_"], "gru")),
        HeadParams(_named(header["head"], chunks[b"HEAD"], "head")),
    )
    try:
        params.check(config)
    except ValueError as e:
        raise WeightFileError(str(e)) from e
    return params, config, header.get("meta", {})
