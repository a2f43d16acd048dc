"""
Loss, Adam and the training loop.

A batch is a gradient accumulation group: samples are processed without
padding, equal-length samples are stacked for speed, gradients are averaged
over the batch before a single Adam step. Every sample is re-augmented each
epoch from a generator derived from ``(augment seed, epoch, sample index)``.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Dict, Hashable, List, Optional, Sequence, Tuple

import cachetools
import numpy as np
import pandas as pd

from ._dask import parallel_map
from ._output import Provenance, write_csv
from .audio_io import AudioClip
from .augment import AugmentationConfig, apply_pipeline
from .features import conv_forward_batch
from .manifest import Dataset
from .math import config_hash, derive_rng, global_norm, log_softmax, softmax, split_even
from .model import ModelConfig, ModelParams, model_backward, model_forward_train, save_checkpoint
from .types import Label, SomePath, TrainingMode

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingLog",
    "EpochRecord",
    "FeatureCache",
    "NonFiniteError",
    "MissingPretrainedWeightsError",
    "cross_entropy_loss",
    "adam_step",
    "train",
    "LR_CONVENTIONAL",
    "LR_LITERAL",
]

_LOG = logging.getLogger(__name__)

LR_CONVENTIONAL = 1e-4
LR_LITERAL = 1e-3


class NonFiniteError(FloatingPointError):
    """Loss or gradient became NaN/Inf."""


class MissingPretrainedWeightsError(ValueError):
    """Configuration needs pretrained conv weights but none were supplied."""


@dataclass(frozen=True)
class TrainConfig:
    """
    Training hyper-parameters.

    ``learning_rate`` defaults to ``1e-4``; :py:data:`LR_LITERAL` (``1e-3``)
    is the alternative reading of the same setting. Augmentation draws come
    from ``augment_seed`` when set, from ``seed`` otherwise.
    """

    epochs: int = 400
    batch_size: int = 32
    learning_rate: float = LR_CONVENTIONAL
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    configuration: TrainingMode = TrainingMode.FROZEN_CONV
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    require_pretrained: bool = True
    checkpoint_every: int = 0
    threads: int = 1
    augment_seed: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "configuration", TrainingMode.parse(self.configuration))
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "configuration": self.configuration.value,
            "seed": self.seed,
            "augmentation": self.augmentation.to_dict(),
            "require_pretrained": self.require_pretrained,
            "checkpoint_every": self.checkpoint_every,
            "augment_seed": self.augment_seed,
        }

    @property
    def effective_augment_seed(self) -> int:
        return self.seed if self.augment_seed is None else self.augment_seed

    @staticmethod
    def from_dict(dd: Dict[str, Any]) -> "TrainConfig":
        dd = dict(dd)
        dd.pop("threads", None)
        if "augmentation" in dd:
            dd["augmentation"] = AugmentationConfig.from_dict(dd["augmentation"])
        if "configuration" in dd:
            dd["configuration"] = TrainingMode.parse(dd["configuration"])
        return TrainConfig(**dd)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def cross_entropy_loss(logits: np.ndarray, target: Label) -> Tuple[float, np.ndarray]:
    """
    ``-log softmax(logits)[target]`` and its gradient ``softmax - one_hot``.

    :raises NonFiniteError: non-finite logits
    """
    logits = np.asarray(logits, dtype="float64")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError(f"Non-finite logits: {logits}")
    t = int(target)
    loss = -float(log_softmax(logits)[..., t])
    grad = softmax(logits)
    grad[..., t] -= 1.0
    return loss, grad


def _cross_entropy_batch(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Summed loss over ``B x 2`` logits and the gradient of the sum."""
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("Non-finite logits")
    rows = np.arange(logits.shape[0])
    loss = -float(np.sum(log_softmax(logits)[rows, targets]))
    grad = softmax(logits)
    grad[rows, targets] -= 1.0
    return loss, grad


@dataclass(eq=False)
class AdamState:
    """First/second moment accumulators keyed like the trainable tensors."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def zeros(params: Dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            {k: np.zeros_like(a) for k, a in params.items()},
            {k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One Adam update with bias correction, in place.

    :raises ValueError: names or shapes of ``params``, ``grads`` and ``state`` differ
    :raises NonFiniteError: non-finite gradient, nothing is updated
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError(
            "Parameter/gradient mismatch: "
            f"missing {sorted(set(params) - set(grads))}, unexpected {sorted(set(grads) - set(params))}"
        )
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for {k}")

    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k in sorted(params):
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_ms: float
    max_grad_norm: float


@dataclass(eq=False)
class TrainingLog:
    """One record per completed epoch."""

    epochs: List[EpochRecord] = field(default_factory=list)
    trace_path: Optional[Path] = None

    @property
    def losses(self) -> List[float]:
        return [e.mean_loss for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.epoch, e.mean_loss, e.wall_ms, e.max_grad_norm) for e in self.epochs],
            columns=["epoch", "mean_loss", "wall_ms", "max_grad_norm"],
        )

    def to_csv(self, path: SomePath, prov: Optional[Provenance] = None) -> Path:
        return write_csv(self.to_frame(), path, prov)


class FeatureCache:
    """
    Conv outputs of a frozen stack keyed by ``(stack fingerprint, sample key)``.

    Shared between epochs and cross-validation folds.
    """

    def __init__(self, maxsize: int = 100_000):
        self._cache: cachetools.LRUCache = cachetools.LRUCache(maxsize=maxsize)
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._cache)

    def features(
        self,
        waveforms: Sequence[np.ndarray],
        keys: Sequence[Hashable],
        params: ModelParams,
        config: ModelConfig,
        fingerprint: Optional[str] = None,
    ) -> List[np.ndarray]:
        """Feature maps for ``waveforms``, computing missing ones in equal-length batches."""
        if not params.conv.frozen:
            raise ValueError("Feature cache requires a frozen conv stack")
        if fingerprint is None:
            fingerprint = params.conv.fingerprint()
        out: List[Optional[np.ndarray]] = [None] * len(waveforms)
        todo: Dict[int, List[int]] = {}
        for i, key in enumerate(keys):
            hit = self._cache.get((fingerprint, key))
            if hit is None:
                self.misses += 1
                todo.setdefault(waveforms[i].shape[0], []).append(i)
            else:
                self.hits += 1
                out[i] = hit
        for idx in todo.values():
            feats, _ = conv_forward_batch(np.stack([waveforms[i] for i in idx]), params.conv, config.conv)
            for i, f in zip(idx, feats):
                f.flags.writeable = False
                self._cache[(fingerprint, keys[i])] = f
                out[i] = f
        return [f for f in out if f is not None]


@dataclass(eq=False)
class _Piece:
    waveforms: Optional[np.ndarray]
    features: Optional[np.ndarray]
    targets: np.ndarray


def _piece_grads(piece: _Piece, params: ModelParams, config: ModelConfig) -> Tuple[float, Dict[str, np.ndarray]]:
    logits, cache = model_forward_train(piece.waveforms, params, config, features=piece.features)
    loss, g_logits = _cross_entropy_batch(logits, piece.targets)
    return loss, model_backward(g_logits, cache, params, config)


def _group_pieces(
    waves: Sequence[np.ndarray],
    targets: Sequence[int],
    feats: Optional[Sequence[np.ndarray]],
    threads: int,
) -> List[_Piece]:
    groups: Dict[int, List[int]] = {}
    for i, w in enumerate(waves):
        groups.setdefault(w.shape[0], []).append(i)

    pieces = []
    for idx in groups.values():
        for start, stop in split_even(len(idx), threads):
            sel = idx[start:stop]
            pieces.append(
                _Piece(
                    None if feats is not None else np.stack([waves[i] for i in sel]),
                    None if feats is None else np.stack([feats[i] for i in sel]),
                    np.array([targets[i] for i in sel], dtype="int64"),
                )
            )
    return pieces


def _check_pretrained(params: ModelParams, config: TrainConfig) -> None:
    mode = config.configuration
    if mode.wants_pretrained and config.require_pretrained and not params.conv.pretrained:
        raise MissingPretrainedWeightsError(
            f"Configuration {mode.value} needs pretrained conv weights, "
            "supply a weight file (or disable require_pretrained)"
        )
    if mode is TrainingMode.FULL_SCRATCH and params.conv.pretrained:
        warnings.warn("full_scratch configuration was given pretrained conv weights")


def train(
    dataset: Dataset,
    params: ModelParams,
    config: TrainConfig,
    model_config: ModelConfig,
    noise_corpus: Optional[Sequence[AudioClip]] = None,
    feature_cache: Optional[FeatureCache] = None,
    checkpoint_dir: Optional[SomePath] = None,
    trace: Optional[IO[str]] = None,
    trace_tags: Optional[Dict[str, Any]] = None,
) -> Tuple[ModelParams, TrainingLog]:
    """
    Train a copy of ``params`` on ``dataset``.

    ``epochs x ceil(N/batch_size)`` Adam steps. Conv tensors are left out of
    the optimizer for ``frozen_conv``. With ``threads == 1`` results are
    bit-reproducible for a given seed, with more threads each batch is split
    into pieces whose gradients are summed in a fixed order.

    :param noise_corpus: Decoded background noise recordings
    :param feature_cache: Reused conv outputs, only consulted when the stack is
                          frozen and augmentation is off
    :param checkpoint_dir: Where checkpoints go when ``config.checkpoint_every > 0``
    :param trace: Text stream receiving one JSON line per augmented sample
    :param trace_tags: Extra leading keys of every trace line
    :raises MissingPretrainedWeightsError: configuration needs pretrained weights
    :raises NonFiniteError: loss or gradient became non-finite
    """
    if len(dataset) == 0:
        raise ValueError("Can not train on an empty dataset")
    if dataset.sample_rate != model_config.sample_rate:
        raise ValueError(
            f"Dataset sample rate {dataset.sample_rate} does not match model rate {model_config.sample_rate}"
        )
    too_short = [s.key for s in dataset.samples if s.waveform.shape[0] < model_config.min_samples]
    if too_short:
        raise ValueError(f"{len(too_short)} samples are shorter than the receptive field, e.g. {too_short[0]}")
    _check_pretrained(params, config)

    params = params.copy()
    params.conv.frozen = not config.configuration.conv_trainable
    params.check(model_config)

    aug = config.augmentation
    if aug.p_background > 0 and not noise_corpus and not aug.noise_corpus:
        raise ValueError("Background noise requested but noise corpus is empty")

    use_cache = params.conv.frozen and aug.is_identity
    if use_cache and feature_cache is None:
        feature_cache = FeatureCache()
    fingerprint = params.conv.fingerprint() if use_cache else None

    trainable = params.trainable_arrays()
    state = AdamState.zeros(trainable)
    log = TrainingLog()
    n = len(dataset)
    seed = config.seed
    aug_seed = config.effective_augment_seed
    tags = dict(trace_tags or {})
    _LOG.info(
        "Training %s: %d samples, %d epochs, batch %d, %d trainable tensors",
        config.configuration.value,
        n,
        config.epochs,
        config.batch_size,
        len(trainable),
    )

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = derive_rng(seed, 1, epoch).permutation(n)
        total_loss = 0.0
        max_norm = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            waves = []
            for i in idx:
                w = dataset.samples[i].waveform
                if not aug.is_identity:
                    rng = derive_rng(aug_seed, 2, epoch, int(i))
                    clip, rec = apply_pipeline(AudioClip.mono(w, dataset.sample_rate), aug, rng, noise_corpus)
                    w = clip.waveform
                    if trace is not None:
                        trace.write(rec.to_json(**tags, epoch=epoch, sample=int(i)) + "\n")
                waves.append(w)
            targets = [int(dataset.samples[i].label) for i in idx]

            feats = None
            if use_cache and feature_cache is not None:
                feats = feature_cache.features(
                    waves, [dataset.samples[i].key for i in idx], params, model_config, fingerprint
                )

            pieces = _group_pieces(waves, targets, feats, config.threads)
            results = parallel_map(lambda p: _piece_grads(p, params, model_config), pieces, threads=config.threads)

            loss_sum = 0.0
            grads = {k: np.zeros_like(a) for k, a in trainable.items()}
            for loss, g in results:
                loss_sum += loss
                for k, a in g.items():
                    grads[k] += a
            scale = 1.0 / len(idx)
            for a in grads.values():
                a *= scale

            if not np.isfinite(loss_sum):
                raise NonFiniteError(f"Non-finite loss at epoch {epoch}, batch {b}")
            norm = global_norm(grads)
            _LOG.debug("epoch %d batch %d loss %.6f grad-norm %.4g", epoch, b, loss_sum * scale, norm)
            try:
                adam_step(trainable, grads, state, config)
            except NonFiniteError as e:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {e}") from None
            total_loss += loss_sum
            max_norm = max(max_norm, norm)

        rec_ = EpochRecord(epoch + 1, total_loss / n, 1000.0 * (time.perf_counter() - t0), max_norm)
        log.epochs.append(rec_)
        _LOG.info("epoch %d/%d loss %.6f (%.0f ms)", rec_.epoch, config.epochs, rec_.mean_loss, rec_.wall_ms)

        if config.checkpoint_every and checkpoint_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
            out = Path(checkpoint_dir) / f"checkpoint-{epoch + 1:04d}.vpdm"
            save_checkpoint(params, model_config, out, meta={"epoch": epoch + 1, "seed": seed})

    return params, log
