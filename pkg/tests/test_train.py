import io
import json

import numpy as np
import numpy.testing as npt
import pytest

from voicepd.audio_io import AudioClip
from voicepd.augment import AugmentationConfig
from voicepd.manifest import Dataset, Sample
from voicepd.math import derive_rng
from voicepd.model import load_checkpoint, predict_batch
from voicepd.testutils import miniature_model, population_dataset
from voicepd.train import (
    LR_CONVENTIONAL,
    AdamState,
    FeatureCache,
    MissingPretrainedWeightsError,
    NonFiniteError,
    TrainConfig,
    adam_step,
    cross_entropy_loss,
    train,
)
from voicepd.types import Label, TrainingMode

# pylint: disable=redefined-outer-name

NO_AUG = AugmentationConfig.disabled()


@pytest.fixture()
def small_dataset():
    population = [("PD0", Label.PD, 2), ("PD1", Label.PD, 3), ("HP0", Label.HP, None), ("HP1", Label.HP, None)]
    return population_dataset(population, samples_per_patient=2, length=120, seed=1)


def _cfg(**kw) -> TrainConfig:
    dd = dict(epochs=3, batch_size=3, configuration="full_scratch", augmentation=NO_AUG, seed=5)
    dd.update(kw)
    return TrainConfig(**dd)


def test_cross_entropy():
    loss, grad = cross_entropy_loss(np.array([0.0, 0.0]), Label.PD)
    assert loss == pytest.approx(np.log(2))
    npt.assert_allclose(grad, [0.5, -0.5])

    loss, grad = cross_entropy_loss(np.array([10.0, -10.0]), Label.HP)
    assert loss == pytest.approx(np.log1p(np.exp(-20.0)))
    assert grad.sum() == pytest.approx(0)

    loss, _ = cross_entropy_loss(np.array([1000.0, -1000.0]), Label.PD)
    assert loss == pytest.approx(2000.0)

    with pytest.raises(NonFiniteError):
        cross_entropy_loss(np.array([np.nan, 0.0]), Label.PD)


def test_config():
    cfg = TrainConfig()
    assert cfg.learning_rate == LR_CONVENTIONAL
    assert cfg.epochs == 400
    assert cfg.batch_size == 32
    assert cfg.configuration is TrainingMode.FROZEN_CONV

    assert TrainConfig(configuration="frozen").configuration is TrainingMode.FROZEN_CONV
    again = TrainConfig.from_dict(_cfg(threads=4).to_dict())
    assert again.to_dict() == _cfg().to_dict()
    assert again.config_hash() == _cfg(threads=2).config_hash()
    assert _cfg(seed=6).config_hash() != _cfg().config_hash()

    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=0), dict(beta1=1.0), dict(threads=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig(configuration="semi_frozen")


def test_adam_first_step():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.1, -3.0, 0.0])}
    state = AdamState.zeros(params)
    cfg = TrainConfig(learning_rate=0.01)
    adam_step(params, grads, state, cfg)
    # bias-corrected first step moves every non-zero entry by lr
    npt.assert_allclose(params["w"], [0.99, -1.99, 0.5], atol=1e-8)
    assert state.t == 1

    with pytest.raises(ValueError):
        adam_step(params, {"v": np.zeros(3)}, state, cfg)
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(2)}, state, cfg)

    before = params["w"].copy()
    with pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array([np.inf, 0, 0])}, state, cfg)
    npt.assert_array_equal(params["w"], before)


def test_adam_converges():
    # minimise (x - 3)^2 from 0
    params = {"x": np.zeros(1)}
    state = AdamState.zeros(params)
    cfg = TrainConfig(learning_rate=0.1)
    for _ in range(500):
        adam_step(params, {"x": 2 * (params["x"] - 3.0)}, state, cfg)
    assert abs(params["x"][0] - 3.0) < 1e-3


def test_train_deterministic(small_dataset):
    cfg, params = miniature_model(seed=2)
    tcfg = _cfg(augmentation=AugmentationConfig(p_background=0))
    a, log_a = train(small_dataset, params, tcfg, cfg)
    b, log_b = train(small_dataset, params, tcfg, cfg)
    assert log_a.losses == log_b.losses
    for k, x in a.named_arrays().items():
        npt.assert_array_equal(x, b.named_arrays()[k])

    assert len(log_a.epochs) == 3
    assert [e.epoch for e in log_a.epochs] == [1, 2, 3]
    df = log_a.to_frame()
    assert list(df.columns) == ["epoch", "mean_loss", "wall_ms", "max_grad_norm"]
    assert (df.max_grad_norm > 0).all()

    # input parameters are left untouched
    npt.assert_array_equal(params.head.arrays["head.w1"], miniature_model(seed=2)[1].head.arrays["head.w1"])


def test_train_threads_close(small_dataset):
    cfg, params = miniature_model(seed=2)
    a, log1 = train(small_dataset, params, _cfg(), cfg)
    b, log4 = train(small_dataset, params, _cfg(threads=4), cfg)
    npt.assert_allclose(log1.losses, log4.losses, rtol=1e-9)
    for k, x in a.named_arrays().items():
        npt.assert_allclose(x, b.named_arrays()[k], rtol=1e-6, atol=1e-9)


def test_train_reduces_loss(small_dataset):
    cfg, params = miniature_model(seed=0)
    _, log = train(small_dataset, params, _cfg(epochs=40, batch_size=8, learning_rate=1e-2), cfg)
    assert log.losses[-1] < log.losses[0]


def test_separable_toy():
    t = np.arange(200) / 16_000
    samples = []
    for j in range(4):
        samples.append(Sample("PD", Label.PD, 3, 0.8 * np.sin(2 * np.pi * 400 * t + j), f"pd/{j}"))
        samples.append(Sample("HP", Label.HP, None, 0.05 * np.sin(2 * np.pi * 150 * t + j), f"hp/{j}"))
    cfg, params = miniature_model(seed=0)
    _, log = train(Dataset(samples), params, _cfg(epochs=50, batch_size=1, learning_rate=1e-2), cfg)
    assert min(log.losses) < 0.05


def test_frozen_conv_unchanged(small_dataset):
    cfg, params = miniature_model(seed=1)
    params.conv.pretrained = True
    tcfg = _cfg(configuration="frozen_conv")
    cache = FeatureCache()
    out, _ = train(small_dataset, params, tcfg, cfg, feature_cache=cache)
    assert out.conv_frozen
    assert out.conv.fingerprint() == params.conv.fingerprint()
    assert not np.array_equal(out.head.arrays["head.w3"], params.head.arrays["head.w3"])

    # features are computed once, then reused
    assert cache.misses == len(small_dataset)
    assert cache.hits == len(small_dataset) * (tcfg.epochs - 1)

    # a warm cache gives the same result
    again, _ = train(small_dataset, params, tcfg, cfg, feature_cache=cache)
    for k, x in out.named_arrays().items():
        npt.assert_array_equal(x, again.named_arrays()[k])


def test_full_pretrained_updates_conv(small_dataset):
    cfg, params = miniature_model(seed=1)
    params.conv.pretrained = True
    out, _ = train(small_dataset, params, _cfg(configuration="full_pretrained"), cfg)
    assert not out.conv_frozen
    assert out.conv.fingerprint() != params.conv.fingerprint()


def test_missing_pretrained(small_dataset):
    cfg, params = miniature_model(seed=1)
    for mode in ("frozen_conv", "full_pretrained"):
        with pytest.raises(MissingPretrainedWeightsError):
            train(small_dataset, params, _cfg(configuration=mode), cfg)
    train(small_dataset, params, _cfg(configuration="frozen_conv", require_pretrained=False, epochs=1), cfg)

    params.conv.pretrained = True
    with pytest.warns(UserWarning, match="pretrained"):
        train(small_dataset, params, _cfg(epochs=1), cfg)


def test_non_finite(small_dataset):
    cfg, params = miniature_model(seed=1)
    params.head.arrays["head.b3"][:] = np.nan
    with pytest.raises(NonFiniteError):
        train(small_dataset, params, _cfg(epochs=1), cfg)


def test_train_errors(small_dataset):
    cfg, params = miniature_model(seed=1)
    short = population_dataset([("P", Label.PD, 1)], samples_per_patient=1, length=cfg.min_samples - 1)
    with pytest.raises(ValueError):
        train(short, params, _cfg(), cfg)
    with pytest.raises(ValueError):
        train(small_dataset.subset([]), params, _cfg(), cfg)
    with pytest.raises(ValueError):
        train(small_dataset, params, _cfg(augmentation=AugmentationConfig()), cfg)


def test_trace(small_dataset):
    cfg, params = miniature_model(seed=1)
    noise = (AudioClip.mono(derive_rng(0).normal(0, 0.1, 400), 16_000),)
    tcfg = _cfg(epochs=2, augmentation=AugmentationConfig(p_background=1.0, p_polarity=1.0))
    buf = io.StringIO()
    train(small_dataset, params, tcfg, cfg, noise_corpus=noise, trace=buf)

    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(lines) == 2 * len(small_dataset)
    assert {(d["epoch"], d["sample"]) for d in lines} == {(e, i) for e in range(2) for i in range(len(small_dataset))}
    assert all(d["background"] and d["polarity"] for d in lines)
    assert all(0 <= d["noise_offset"] <= 399 for d in lines)


def test_zero_probability_matches_raw(small_dataset):
    cfg, params = miniature_model(seed=3)
    zero = AugmentationConfig(
        p_background=0,
        p_colored=0,
        p_shift=0,
        p_polarity=0,
        shift_fraction_range=(-0.5, 0.5),
        snr_db_range=(5.0, 6.0),
    )
    raw, log_raw = train(small_dataset, params, _cfg(), cfg)
    for aug_seed in (None, 17):
        out, log = train(small_dataset, params, _cfg(augmentation=zero, augment_seed=aug_seed), cfg)
        assert log.losses == log_raw.losses
        for k, x in out.named_arrays().items():
            npt.assert_array_equal(x, raw.named_arrays()[k])


def test_augment_seed(small_dataset):
    cfg, params = miniature_model(seed=3)
    aug = AugmentationConfig(p_background=0, p_colored=1.0, p_shift=1.0)
    a, _ = train(small_dataset, params, _cfg(augmentation=aug, augment_seed=1), cfg)
    b, _ = train(small_dataset, params, _cfg(augmentation=aug, augment_seed=2), cfg)
    c, _ = train(small_dataset, params, _cfg(augmentation=aug, augment_seed=1), cfg)
    assert not np.array_equal(a.head.arrays["head.w1"], b.head.arrays["head.w1"])
    npt.assert_array_equal(a.head.arrays["head.w1"], c.head.arrays["head.w1"])
    assert _cfg(augment_seed=1).config_hash() != _cfg().config_hash()


def test_checkpoints(small_dataset, tmp_path):
    cfg, params = miniature_model(seed=1)
    out, _ = train(small_dataset, params, _cfg(epochs=4, checkpoint_every=2), cfg, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint-0002.vpdm", "checkpoint-0004.vpdm"]

    last, _, meta = load_checkpoint(tmp_path / "checkpoint-0004.vpdm")
    assert meta["epoch"] == 4
    waves = [s.waveform for s in small_dataset.samples]
    for a, b in zip(predict_batch(waves, out, cfg), predict_batch(waves, last, cfg)):
        npt.assert_array_equal(a.logits, b.logits)
