"""
Temporal convolution feature encoder and STFT spectrogram.

The encoder is a stack of valid (unpadded) strided 1-d convolutions, each
followed by an optional per-channel group normalisation and GELU. Data is kept
channel-last: ``batch x time x channels``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from ._container import (
    MagicMismatchError,
    ShapeMismatchError,
    TruncatedFileError,
    WeightFileError,
    check_magic,
    read_array_data,
    read_shape,
    read_u32,
    write_array,
    write_u32,
)
from .math import array_fingerprint, conv_out_length, gelu, gelu_grad
from .types import SomePath

__all__ = [
    "ConvLayer",
    "ConvStackConfig",
    "ConvStackParams",
    "ConvCache",
    "FeatureMap",
    "SpectrogramConfig",
    "conv_forward",
    "conv_forward_batch",
    "conv_backward",
    "save_weights",
    "load_weights",
    "stft_spectrogram",
    "featuremap_comparison",
    "FrozenParamsError",
    "MissingCacheError",
    "WeightFileError",
    "MagicMismatchError",
    "ShapeMismatchError",
    "TruncatedFileError",
]

_LOG = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"W2VC"
WEIGHTS_VERSION = 1
NORM_EPS = 1e-5

ACTIVATIONS = ("gelu",)
NORMALIZATIONS = ("group_norm_first", "none")


class FrozenParamsError(RuntimeError):
    """Attempt to update a frozen conv stack."""


class MissingCacheError(RuntimeError):
    """Backward pass requested without a training-mode forward cache."""


class ConvLayer(NamedTuple):
    """Shape of one convolution layer."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class ConvStackConfig:
    """
    Conv stack architecture.

    :param layers: Layer shapes, first layer reads a single channel
    :param activation: Only ``"gelu"``
    :param normalization: ``"group_norm_first"`` (per-channel normalisation over
                          time on the first layer) or ``"none"``
    """

    layers: Tuple[ConvLayer, ...]
    activation: str = "gelu"
    normalization: str = "group_norm_first"

    def __post_init__(self) -> None:
        layers = tuple(ConvLayer(*map(int, ll)) for ll in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("Conv stack needs at least one layer")
        if layers[0].in_channels != 1:
            raise ValueError(f"First layer must read 1 channel, got {layers[0].in_channels}")
        for i, ll in enumerate(layers):
            if not ll.kernel >= ll.stride >= 1:
                raise ValueError(f"Layer {i}: need kernel >= stride >= 1, got {ll.kernel}, {ll.stride}")
            if ll.out_channels < 1:
                raise ValueError(f"Layer {i}: out_channels must be positive")
            if i > 0 and layers[i - 1].out_channels != ll.in_channels:
                raise ValueError(
                    f"Layer {i}: in_channels {ll.in_channels} != "
                    f"previous out_channels {layers[i - 1].out_channels}"
                )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation: {self.activation!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"Unknown normalization: {self.normalization!r}")

    @staticmethod
    def wav2vec2_base(channels: int = 512) -> "ConvStackConfig":
        """Seven layer encoder: kernels 10,3,3,3,3,2,2 strides 5,2,2,2,2,2,2."""
        kernels = (10, 3, 3, 3, 3, 2, 2)
        strides = (5, 2, 2, 2, 2, 2, 2)
        layers = []
        c_in = 1
        for k, s in zip(kernels, strides):
            layers.append(ConvLayer(c_in, channels, k, s))
            c_in = channels
        return ConvStackConfig(tuple(layers))

    @staticmethod
    def miniature(channels: int = 8, num_layers: int = 2) -> "ConvStackConfig":
        """First ``num_layers`` of the base layout at reduced width."""
        base = ConvStackConfig.wav2vec2_base(channels).layers
        if not 1 <= num_layers <= len(base):
            raise ValueError(f"num_layers must be in [1, {len(base)}]")
        return ConvStackConfig(base[:num_layers])

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def receptive_field(self) -> int:
        """Minimum input length producing one frame."""
        r = 1
        for ll in reversed(self.layers):
            r = (r - 1) * ll.stride + ll.kernel
        return r

    @property
    def total_stride(self) -> int:
        s = 1
        for ll in self.layers:
            s *= ll.stride
        return s

    def num_frames(self, n: int) -> int:
        for ll in self.layers:
            n = conv_out_length(n, ll.kernel, ll.stride)
        return n

    def frame_rate(self, sample_rate: float) -> float:
        return sample_rate / self.total_stride

    def layer_norm(self, idx: int) -> bool:
        return self.normalization == "group_norm_first" and idx == 0

    def to_dict(self) -> Dict:
        return {
            "layers": [list(ll) for ll in self.layers],
            "activation": self.activation,
            "normalization": self.normalization,
        }

    @staticmethod
    def from_dict(dd: Dict) -> "ConvStackConfig":
        return ConvStackConfig(
            tuple(ConvLayer(*ll) for ll in dd["layers"]),
            activation=dd.get("activation", "gelu"),
            normalization=dd.get("normalization", "group_norm_first"),
        )


@dataclass(eq=False)
class ConvStackParams:
    """
    Trainable tensors of the conv stack.

    ``weights[i]`` is ``out x in x kernel``. Normalisation scale/offset are
    ``None`` for layers without normalisation. ``pretrained`` marks parameters
    loaded from a weight file.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    norm_scale: List[Optional[np.ndarray]]
    norm_bias: List[Optional[np.ndarray]]
    frozen: bool = False
    pretrained: bool = False

    @staticmethod
    def initialize(config: ConvStackConfig, rng: np.random.Generator, frozen: bool = False) -> "ConvStackParams":
        """Kaiming-uniform weights, zero biases, unit norm scale."""
        weights, biases, scales, offsets = [], [], [], []
        for i, ll in enumerate(config.layers):
            fan_in = ll.in_channels * ll.kernel
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(ll.out_channels, ll.in_channels, ll.kernel)))
            biases.append(np.zeros(ll.out_channels))
            if config.layer_norm(i):
                scales.append(np.ones(ll.out_channels))
                offsets.append(np.zeros(ll.out_channels))
            else:
                scales.append(None)
                offsets.append(None)
        return ConvStackParams(weights, biases, scales, offsets, frozen=frozen)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """All tensors by name, values are the live arrays (not copies)."""
        out: Dict[str, np.ndarray] = {}
        for i in range(self.num_layers):
            out[f"conv.{i}.weight"] = self.weights[i]
            out[f"conv.{i}.bias"] = self.biases[i]
            scale, offset = self.norm_scale[i], self.norm_bias[i]
            if scale is not None and offset is not None:
                out[f"conv.{i}.norm_scale"] = scale
                out[f"conv.{i}.norm_bias"] = offset
        return out

    def trainable_arrays(self) -> Dict[str, np.ndarray]:
        """
        Tensors an optimizer may update.

        :raises FrozenParamsError: when frozen
        """
        if self.frozen:
            raise FrozenParamsError("Conv stack is frozen, it can not be updated")
        return self.named_arrays()

    def copy(self, frozen: Optional[bool] = None) -> "ConvStackParams":
        def _cp(xs):
            return [None if x is None else x.copy() for x in xs]

        return ConvStackParams(
            _cp(self.weights),
            _cp(self.biases),
            _cp(self.norm_scale),
            _cp(self.norm_bias),
            frozen=self.frozen if frozen is None else frozen,
            pretrained=self.pretrained,
        )

    def check(self, config: ConvStackConfig) -> None:
        """
        Verify shapes against ``config``.

        :raises ShapeMismatchError: message names the first bad layer
        """
        if self.num_layers != len(config.layers):
            raise ShapeMismatchError(
                f"Layer count mismatch: params have {self.num_layers}, config has {len(config.layers)}"
            )
        for i, ll in enumerate(config.layers):
            expect = (ll.out_channels, ll.in_channels, ll.kernel)
            if self.weights[i].shape != expect:
                raise ShapeMismatchError(f"Layer {i}: weight shape {self.weights[i].shape}, expect {expect}")
            if self.biases[i].shape != (ll.out_channels,):
                raise ShapeMismatchError(f"Layer {i}: bias shape {self.biases[i].shape}")
            has_norm = self.norm_scale[i] is not None
            if has_norm != config.layer_norm(i):
                raise ShapeMismatchError(f"Layer {i}: normalisation parameters do not match config")

    def fingerprint(self) -> str:
        return array_fingerprint(list(self.named_arrays().values()))


@dataclass(eq=False)
class FeatureMap:
    """Time-major ``frames x channels`` matrix."""

    values: np.ndarray
    frame_rate: float

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"Feature map needs at least one frame, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Feature map has non-finite entries")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class ConvCache:
    """Per-layer state kept by a training-mode forward pass."""

    inputs: List[np.ndarray] = field(default_factory=list)
    preacts: List[np.ndarray] = field(default_factory=list)
    xhat: List[Optional[np.ndarray]] = field(default_factory=list)
    inv_std: List[Optional[np.ndarray]] = field(default_factory=list)


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """``B x L x C`` -> ``B x L_out x (C*kernel)``, channel-major within a patch."""
    b, _, c = x.shape
    win = sliding_window_view(x, kernel, axis=1)[:, ::stride]
    return win.reshape(b, win.shape[1], c * kernel)


def _col2im(dcols: np.ndarray, n: int, kernel: int, stride: int) -> np.ndarray:
    b, n_out, ck = dcols.shape
    c = ck // kernel
    d = dcols.reshape(b, n_out, c, kernel)
    dx = np.zeros((b, n, c), dtype=dcols.dtype)
    span = stride * (n_out - 1) + 1
    for j in range(kernel):
        dx[:, j : j + span : stride, :] += d[:, :, :, j]
    return dx


def conv_forward_batch(
    waveforms: np.ndarray,
    params: ConvStackParams,
    config: ConvStackConfig,
    training: bool = False,
) -> Tuple[np.ndarray, Optional[ConvCache]]:
    """
    Run the stack over equal-length waveforms.

    :param waveforms: ``B x N`` samples
    :return: ``B x frames x channels`` and, when ``training``, the cache
    """
    x = np.asarray(waveforms, dtype="float64")
    if x.ndim != 2:
        raise ValueError(f"Expect B x N waveforms, got shape {x.shape}")
    if x.shape[1] < config.receptive_field:
        raise ValueError(
            f"Input of {x.shape[1]} samples is shorter than receptive field {config.receptive_field}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("Non-finite input samples")
    params.check(config)

    cache = ConvCache() if training else None
    h = x[:, :, np.newaxis]
    for i, ll in enumerate(config.layers):
        cols = _im2col(h, ll.kernel, ll.stride)
        z = cols @ params.weights[i].reshape(ll.out_channels, -1).T + params.biases[i]
        xhat = inv_std = None
        scale, offset = params.norm_scale[i], params.norm_bias[i]
        if scale is not None and offset is not None:
            mu = z.mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + NORM_EPS)
            xhat = (z - mu) * inv_std
            z = xhat * scale + offset
        if cache is not None:
            cache.inputs.append(h)
            cache.preacts.append(z)
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
        h = gelu(z)

    return h, cache


def conv_forward(
    waveform: np.ndarray,
    params: ConvStackParams,
    config: ConvStackConfig,
    training: bool = False,
    sample_rate: float = 16_000,
) -> Tuple[FeatureMap, Optional[ConvCache]]:
    """
    Feature map of a single mono waveform.

    Frame count is ``floor((L - kernel)/stride) + 1`` composed over layers.

    :raises ValueError: input shorter than the receptive field, non-finite input
    """
    x = np.asarray(waveform, dtype="float64").reshape(1, -1)
    h, cache = conv_forward_batch(x, params, config, training=training)
    return FeatureMap(h[0], config.frame_rate(sample_rate)), cache


def conv_backward(
    grad_out: np.ndarray,
    cache: Optional[ConvCache],
    params: ConvStackParams,
    config: ConvStackConfig,
) -> Tuple[np.ndarray, Optional[Dict[str, np.ndarray]]]:
    """
    Exact gradients of :py:func:`conv_forward`.

    :param grad_out: ``frames x channels`` or ``B x frames x channels``
    :return: Input gradient (shaped like the waveform input) and parameter
             gradients keyed like :py:meth:`ConvStackParams.named_arrays`,
             ``None`` for a frozen stack.
    :raises MissingCacheError: ``cache`` is ``None``
    """
    if cache is None or not cache.inputs:
        raise MissingCacheError("conv_backward needs the cache of a training-mode forward pass")

    g = np.asarray(grad_out, dtype="float64")
    single = g.ndim == 2
    if single:
        g = g[np.newaxis]

    grads: Optional[Dict[str, np.ndarray]] = None if params.frozen else {}
    for i in reversed(range(len(config.layers))):
        ll = config.layers[i]
        h_in = cache.inputs[i]
        g = g * gelu_grad(cache.preacts[i])

        xhat, inv_std = cache.xhat[i], cache.inv_std[i]
        scale = params.norm_scale[i]
        if xhat is not None and inv_std is not None and scale is not None:
            if grads is not None:
                grads[f"conv.{i}.norm_scale"] = np.einsum("blc,blc->c", g, xhat)
                grads[f"conv.{i}.norm_bias"] = g.sum(axis=(0, 1))
            dxhat = g * scale
            g = inv_std * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )

        cols = _im2col(h_in, ll.kernel, ll.stride)
        w2 = params.weights[i].reshape(ll.out_channels, -1)
        if grads is not None:
            grads[f"conv.{i}.weight"] = np.einsum("blo,blk->ok", g, cols).reshape(params.weights[i].shape)
            grads[f"conv.{i}.bias"] = g.sum(axis=(0, 1))
        g = _col2im(g @ w2, h_in.shape[1], ll.kernel, ll.stride)

    dx = g[:, :, 0]
    return (dx[0] if single else dx), grads


def weights_to_bytes(params: ConvStackParams) -> bytes:
    """
    Serialise conv parameters.

    ``W2VC``, ``u32`` version, ``u32`` layer count, then per layer: weight,
    bias, ``u32`` norm flag and optional norm scale/offset, every array with a
    shape header followed by little-endian ``float64`` data.
    """
    buf = BytesIO()
    buf.write(WEIGHTS_MAGIC)
    write_u32(buf, WEIGHTS_VERSION)
    write_u32(buf, params.num_layers)
    for i in range(params.num_layers):
        write_array(buf, params.weights[i])
        write_array(buf, params.biases[i])
        scale, offset = params.norm_scale[i], params.norm_bias[i]
        if scale is None or offset is None:
            write_u32(buf, 0)
        else:
            write_u32(buf, 1)
            write_array(buf, scale)
            write_array(buf, offset)
    return buf.getvalue()


def weights_from_bytes(
    data: bytes, config: ConvStackConfig, frozen: bool = False, pretrained: bool = True
) -> ConvStackParams:
    src = BytesIO(data)
    check_magic(src, WEIGHTS_MAGIC, (WEIGHTS_VERSION,))
    n_layers = read_u32(src, "layer count")
    if n_layers != len(config.layers):
        raise ShapeMismatchError(f"File has {n_layers} layers, config has {len(config.layers)}")

    weights, biases, scales, offsets = [], [], [], []
    for i, ll in enumerate(config.layers):

        def _read(expect: Tuple[int, ...], what: str) -> np.ndarray:
            shape = read_shape(src, f"layer {i} {what}")
            if shape != expect:
                raise ShapeMismatchError(f"Layer {i}: {what} shape {shape}, expect {expect}")
            return read_array_data(src, shape, f"layer {i} {what}")

        weights.append(_read((ll.out_channels, ll.in_channels, ll.kernel), "weight"))
        biases.append(_read((ll.out_channels,), "bias"))
        has_norm = read_u32(src, f"layer {i} norm flag")
        if bool(has_norm) != config.layer_norm(i):
            raise ShapeMismatchError(f"Layer {i}: normalisation flag does not match config")
        if has_norm:
            scales.append(_read((ll.out_channels,), "norm scale"))
            offsets.append(_read((ll.out_channels,), "norm bias"))
        else:
            scales.append(None)
            offsets.append(None)

    if src.read(1):
        raise WeightFileError("Trailing bytes after last layer")

    params = ConvStackParams(weights, biases, scales, offsets, frozen=frozen, pretrained=pretrained)
    for name, a in params.named_arrays().items():
        if not np.all(np.isfinite(a)):
            raise WeightFileError(f"Non-finite values in {name}")
    return params


def save_weights(params: ConvStackParams, path: SomePath) -> None:
    Path(path).write_bytes(weights_to_bytes(params))


def load_weights(path: SomePath, config: ConvStackConfig, frozen: bool = False) -> ConvStackParams:
    """
    Load conv parameters saved by :py:func:`save_weights`.

    :raises MagicMismatchError: not a weight file
    :raises ShapeMismatchError: shapes differ from ``config``, names the layer
    :raises TruncatedFileError: file ends early
    """
    _LOG.debug("Loading conv weights from %s", path)
    return weights_from_bytes(Path(path).read_bytes(), config, frozen=frozen)


@dataclass(frozen=True)
class SpectrogramConfig:
    """
    STFT settings.

    Default hop of 896 samples gives an overlap of ``fft_length/8``.
    """

    fft_length: int = 1024
    hop: int = 896
    window: str = "hann"

    def __post_init__(self) -> None:
        n = self.fft_length
        if n < 2 or n & (n - 1) != 0:
            raise ValueError(f"fft_length must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must be in (0, fft_length], got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"Unsupported window: {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.fft_length // 2

    def num_frames(self, n: int) -> int:
        return conv_out_length(n, self.fft_length, self.hop)


def stft_spectrogram(waveform: np.ndarray, config: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """
    Magnitude STFT, ``time x frequency``.

    Periodic Hann window, the Nyquist bin is dropped leaving ``fft_length/2``
    bins starting at DC.
    """
    x = np.asarray(waveform, dtype="float64").ravel()
    if x.shape[0] < config.fft_length:
        raise ValueError(f"Waveform of {x.shape[0]} samples is shorter than one window ({config.fft_length})")
    win = get_window(config.window, config.fft_length, fftbins=True)
    frames = sliding_window_view(x, config.fft_length)[:: config.hop]
    spec = np.abs(np.fft.rfft(frames * win, axis=-1))
    return spec[:, : config.num_bins]


def featuremap_comparison(
    waveform: np.ndarray,
    params: ConvStackParams,
    config: ConvStackConfig,
    spec_config: SpectrogramConfig = SpectrogramConfig(),
    sample_rate: float = 16_000,
) -> Tuple[np.ndarray, FeatureMap]:
    """Spectrogram and final-layer (post activation) feature map of one clip."""
    spec = stft_spectrogram(waveform, spec_config)
    fmap, _ = conv_forward(waveform, params, config, sample_rate=sample_rate)
    return spec, fmap

