import importlib
import json
import math
from collections import Counter

import numpy as np
import pytest

import voicepd.train
from voicepd.augment import AugmentationConfig
from voicepd.evaluation import (
    TABLE_COLUMNS,
    FoldMetrics,
    MetricsReport,
    confusion_metrics,
    cross_validate,
    evaluate_fold,
    predict_samples,
    roc_auc,
    stratified_group_kfold,
    vote,
)
from voicepd.manifest import load_dataset, load_manifest
from voicepd.model import ModelConfig, Prediction
from voicepd.testutils import cohort_population, constructed_votes, population_dataset
from voicepd.train import FeatureCache, TrainConfig
from voicepd.types import Label

# voicepd/__init__ re-exports the train() function under the submodule's name,
# so resolve the module object explicitly for monkeypatching.
train_module = importlib.import_module("voicepd.train")


def _preds(labels):
    return [Prediction.from_label(lbl) for lbl in labels]


def test_vote():
    r = vote(_preds(["PD", "PD", "HP"]), "a")
    assert (r.votes_pd, r.votes_total, r.label) == (2, 3, Label.PD)
    assert r.certainty == pytest.approx(2 / 3)

    tie = vote(_preds(["PD", "HP"]))
    assert tie.label is Label.PD
    assert tie.certainty == 0.5

    assert vote(_preds(["HP"] * 4)).label is Label.HP
    assert vote(_preds(["HP", "HP", "PD"])).certainty == pytest.approx(1 / 3)

    with pytest.raises(ValueError):
        vote([], "nobody")


def test_vote_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        labels = [Label(int(v)) for v in rng.integers(0, 2, rng.integers(1, 30))]
        r = vote(_preds(labels))
        counts = Counter(labels)
        assert r.votes_pd == counts[Label.PD]
        assert r.label is (Label.PD if counts[Label.PD] >= counts[Label.HP] else Label.HP)
        assert (r.certainty >= 0.5) == (r.label is Label.PD)


def test_roc_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], ["PD", "PD", "HP", "HP"]) == 1.0
    assert roc_auc([0.1, 0.2, 0.9, 0.8], ["PD", "PD", "HP", "HP"]) == 0.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], ["PD", "HP", "PD", "HP"]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], ["PD", "PD"])


def test_roc_auc_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(0, 49))
        labels = [Label.PD, Label.HP] + [Label(int(v)) for v in rng.integers(0, 2, n)]
        # coarse scores so that ties happen
        scores = rng.integers(0, 5, len(labels)) / 4

        pos = [s for s, lbl in zip(scores, labels) if lbl is Label.PD]
        neg = [s for s, lbl in zip(scores, labels) if lbl is Label.HP]
        pairs = [(1.0 if p > q else 0.5 if p == q else 0.0) for p in pos for q in neg]
        auc = roc_auc(scores, labels)
        assert auc == pytest.approx(sum(pairs) / len(pairs), abs=1e-12)
        assert auc == pytest.approx(1 - roc_auc(-scores, labels), abs=1e-12)


def test_constructed_votes():
    results, truth = constructed_votes(n_pd=38, n_hp=10, pd_missed=1)
    cm = confusion_metrics(results, truth)
    assert (cm.tp, cm.fn, cm.tn, cm.fp) == (37, 1, 10, 0)
    assert round(100 * cm.accuracy, 2) == 97.92
    assert cm.sensitivity == pytest.approx(0.974, abs=5e-4)
    assert cm.specificity == 1.0

    with pytest.raises(ValueError):
        confusion_metrics(results, {})
    with pytest.raises(ValueError):
        confusion_metrics([], truth)

    only_pd, truth_pd = constructed_votes(n_pd=3, n_hp=0, pd_missed=0)
    cm = confusion_metrics(only_pd, truth_pd)
    assert math.isnan(cm.specificity)
    assert cm.sensitivity == 1.0


def test_stratified_folds():
    population = cohort_population()
    assert len(population) == 48
    folds = stratified_group_kfold(population, 5, seed=0)

    assert set(folds.folds) == {pid for pid, _, _ in population}
    sizes = folds.sizes()
    assert sum(sizes) == 48
    assert max(sizes) - min(sizes) <= 1

    strata = {}
    for pid, group, hy in population:
        strata.setdefault("HP" if group is Label.HP else hy, []).append(pid)
    for members in strata.values():
        per_fold = Counter(folds.fold_of(p) for p in members)
        counts = [per_fold.get(i, 0) for i in range(5)]
        assert max(counts) - min(counts) <= 1

    for i in range(5):
        test = folds.test_patients(i)
        groups = {g for pid, g, _ in population if pid in test}
        assert groups == {Label.PD, Label.HP}
        assert not set(test) & set(folds.train_patients(i))

    again = stratified_group_kfold(population, 5, seed=0)
    assert again.folds == folds.folds
    other = stratified_group_kfold(population, 5, seed=1)
    assert other.folds != folds.folds


def test_stratified_folds_errors():
    population = cohort_population()
    with pytest.raises(ValueError):
        stratified_group_kfold(population, 1)
    with pytest.raises(ValueError):
        stratified_group_kfold(population[:3], 5)
    with pytest.raises(ValueError):
        stratified_group_kfold(population[:5] + population[:1], 2)


def test_report_frame():
    folds = [
        FoldMetrics(0, 0.8, 1.0, 1.0, 1.0, 1.0),
        FoldMetrics(1, 0.6, 0.5, math.nan, 0.5, math.nan),
    ]
    report = MetricsReport("frozen_conv", folds)
    mean = report.mean()
    assert mean["single_sample_accuracy"] == pytest.approx(0.7)
    assert mean["voting_roc_auc"] == 1.0
    assert mean["specificity"] == 1.0

    df = report.to_frame()
    assert list(df.fold) == ["0", "1", "mean"]
    assert list(df.columns) == ["configuration", "fold", *TABLE_COLUMNS.values()]

    doc = json.loads(report.to_json())
    assert doc["folds"][1]["voting_roc_auc"] is None
    assert doc["mean"]["voting_accuracy"] == pytest.approx(0.75)


def test_evaluate_fold(mini):
    cfg, params = mini
    population = [("A", Label.PD, 2), ("B", Label.HP, None), ("C", Label.PD, 4)]
    test = population_dataset(population, samples_per_patient=3, length=100)
    metrics, rows = evaluate_fold(test, params, cfg, fold=2)
    assert [r.patient_id for r in rows] == ["A", "B", "C"]
    assert all(r.fold == 2 and r.votes_total == 3 for r in rows)
    assert rows[1].hy_grade is None
    assert 0 <= metrics.single_sample_accuracy <= 1

    preds = predict_samples(test, params, cfg)
    assert len(preds) == 9

    frozen = params.copy()
    frozen.conv.frozen = True
    cache = FeatureCache()
    cached = predict_samples(test, frozen, cfg, cache)
    assert len(cache) == 9
    for a, b in zip(preds, cached):
        np.testing.assert_allclose(a.logits, b.logits)


def test_cross_validate_small():
    population = [(f"P{i}", Label.PD, 1 + i % 3) for i in range(6)] + [(f"H{i}", Label.HP, None) for i in range(4)]
    dataset = population_dataset(population, samples_per_patient=2, length=100, seed=3)
    mcfg = ModelConfig.miniature()
    tcfg = TrainConfig(
        epochs=2,
        batch_size=4,
        configuration="full_scratch",
        augmentation=AugmentationConfig.disabled(),
        seed=11,
    )
    report = cross_validate(dataset, tcfg, mcfg, k=2)
    assert report.configuration == "full_scratch"
    assert len(report.folds) == 2
    assert len(report.logs) == 2
    assert sorted(r.patient_id for r in report.votes) == sorted(p for p, _, _ in population)

    votes = report.votes_frame()
    assert list(votes.columns) == [
        "patient_id",
        "fold",
        "group",
        "hy_grade",
        "certainty",
        "label",
        "votes_pd",
        "votes_total",
    ]
    assert votes.votes_total.eq(2).all()

    again = cross_validate(dataset, tcfg, mcfg, k=2)
    assert again.to_frame().equals(report.to_frame())


def test_evaluation_without_augmentation(mini, monkeypatch):
    cfg, params = mini
    population = [("A", Label.PD, 2), ("B", Label.HP, None), ("C", Label.PD, 4)]
    test = population_dataset(population, samples_per_patient=3, length=100)
    expect_metrics, expect_rows = evaluate_fold(test, params, cfg)

    def _fail(*args, **kw):
        raise AssertionError("augmentation applied at evaluation time")

    monkeypatch.setattr(train_module, "apply_pipeline", _fail)
    metrics, rows = evaluate_fold(test, params, cfg)
    assert metrics == expect_metrics
    assert rows == expect_rows


def test_cross_validate_augments_training_only(monkeypatch):
    population = [(f"P{i}", Label.PD, 1 + i % 3) for i in range(6)] + [(f"H{i}", Label.HP, None) for i in range(4)]
    dataset = population_dataset(population, samples_per_patient=2, length=100, seed=3)
    mcfg = ModelConfig.miniature()
    base = dict(epochs=2, batch_size=4, configuration="full_scratch", seed=11)

    calls = Counter()
    real = train_module.apply_pipeline

    def _counting(*args, **kw):
        calls["n"] += 1
        return real(*args, **kw)

    monkeypatch.setattr(train_module, "apply_pipeline", _counting)
    aug = AugmentationConfig(p_background=0, p_colored=1.0)
    cross_validate(dataset, TrainConfig(augmentation=aug, augment_seed=1, **base), mcfg, k=2)
    # every sample trains in k - 1 = 1 fold, nothing is augmented for testing
    assert calls["n"] == base["epochs"] * len(dataset)

    # augment_seed only feeds augmentation
    off = AugmentationConfig.disabled()
    a = cross_validate(dataset, TrainConfig(augmentation=off, augment_seed=1, **base), mcfg, k=2)
    b = cross_validate(dataset, TrainConfig(augmentation=off, augment_seed=2, **base), mcfg, k=2)
    assert a.to_frame().equals(b.to_frame())
    assert a.votes_frame().equals(b.votes_frame())


@pytest.mark.slow
@pytest.mark.timeout(3600)
def test_end_to_end_synthetic(tmp_path):
    from voicepd.synth import SynthConfig, synth_generate

    manifest = synth_generate(
        SynthConfig(n_pd=12, n_hp=8, samples_per_patient=20, duration_range=(1.0, 1.0), seed=0), tmp_path
    )
    mcfg = ModelConfig()
    dataset = load_dataset(load_manifest(manifest), min_samples=mcfg.min_samples)
    tcfg = TrainConfig(
        epochs=60,
        batch_size=32,
        learning_rate=1e-4,
        configuration="frozen_conv",
        require_pretrained=False,
        augmentation=AugmentationConfig.disabled(),
        seed=0,
    )
    report = cross_validate(dataset, tcfg, mcfg, k=5)
    mean = report.mean()
    assert mean["voting_accuracy"] >= 0.9
    assert mean["voting_roc_auc"] >= 0.95
