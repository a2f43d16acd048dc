"""
Cross-validation, voting inference and metrics.

Folds are built over patients, never samples. Evaluation runs the model
without augmentation, per-sample predictions are aggregated per patient by
majority vote with ties going to PD.
"""
from __future__ import annotations

import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import IO, Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from ._dask import parallel_map
from ._output import Provenance
from .audio_io import AudioClip
from .features import ConvStackParams
from .manifest import Dataset
from .model import ModelConfig, ModelParams, Prediction, predict_batch, predict_features
from .train import FeatureCache, TrainConfig, TrainingLog, train
from .types import Label, MaybeInt

__all__ = [
    "FoldAssignment",
    "VotingResult",
    "ConfusionMetrics",
    "FoldMetrics",
    "MetricsReport",
    "stratified_group_kfold",
    "vote",
    "roc_auc",
    "confusion_metrics",
    "predict_samples",
    "evaluate_fold",
    "cross_validate",
    "TABLE_COLUMNS",
]

_LOG = logging.getLogger(__name__)

TABLE_COLUMNS = {
    "single_sample_accuracy": "Single-sample accuracy",
    "voting_accuracy": "Inferred voting accuracy",
    "voting_roc_auc": "Inferred voting ROC AUC",
    "sensitivity": "Inferred voting sensitivity (true positive rate)",
    "specificity": "Inferred voting specificity (true negative rate)",
}


def stratum_of(group: Label, hy_grade: MaybeInt) -> str:
    if Label.parse(group) is Label.HP:
        return "HP"
    return f"HY{hy_grade}"


@dataclass(frozen=True)
class FoldAssignment:
    """Patient id to fold index in ``[0, k)``."""

    folds: Mapping[str, int]
    k: int

    def fold_of(self, patient_id: str) -> int:
        return self.folds[patient_id]

    def test_patients(self, fold: int) -> List[str]:
        return [p for p, f in self.folds.items() if f == fold]

    def train_patients(self, fold: int) -> List[str]:
        return [p for p, f in self.folds.items() if f != fold]

    def sizes(self) -> List[int]:
        return [len(self.test_patients(i)) for i in range(self.k)]


def stratified_group_kfold(
    patients: Sequence[Tuple[str, Any, MaybeInt]], k: int = 5, seed: int = 0
) -> FoldAssignment:
    """
    Assign whole patients to ``k`` folds, balanced per stratum.

    Strata are HP plus one per Hoehn-Yahr grade. Patients are shuffled within
    each stratum, then dealt round-robin; the dealing position carries over
    from one stratum to the next so total fold sizes stay balanced too.

    :param patients: ``(patient_id, group, hy_grade)``
    :raises ValueError: ``k < 2``, more folds than patients, duplicate ids
    """
    if k < 2:
        raise ValueError(f"Need k >= 2, got {k}")
    if k > len(patients):
        raise ValueError(f"Can not make {k} folds from {len(patients)} patients")

    strata: Dict[str, List[str]] = {}
    seen = set()
    for pid, group, hy in patients:
        if pid in seen:
            raise ValueError(f"Duplicate patient id {pid!r}")
        seen.add(pid)
        strata.setdefault(stratum_of(group, hy), []).append(pid)

    rng = np.random.default_rng(seed)
    folds: Dict[str, int] = {}
    pos = 0
    for name in sorted(strata):
        members = sorted(strata[name])
        for j in rng.permutation(len(members)):
            folds[members[j]] = pos % k
            pos += 1

    return FoldAssignment({pid: folds[pid] for pid, _, _ in patients}, k)


@dataclass(frozen=True)
class VotingResult:
    """
    Per-patient aggregate of single-sample predictions.

    ``label`` is PD iff ``certainty >= 0.5``.
    """

    patient_id: str
    votes_pd: int
    votes_total: int
    certainty: float
    label: Label


def vote(predictions: Iterable[Prediction], patient_id: str = "") -> VotingResult:
    """
    Majority vote, ``certainty`` is the fraction of PD votes; exact ties give PD.

    :raises ValueError: no predictions
    """
    labels = [p.label for p in predictions]
    if not labels:
        raise ValueError(f"No predictions to vote on for patient {patient_id!r}")
    n_pd = sum(1 for lbl in labels if lbl is Label.PD)
    n = len(labels)
    certainty = n_pd / n
    label = Label.PD if 2 * n_pd >= n else Label.HP
    return VotingResult(patient_id, n_pd, n, certainty, label)


def roc_auc(scores: Sequence[float], labels: Sequence[Any]) -> float:
    """
    Area under ROC curve as the Mann-Whitney statistic.

    ``P(score_pos > score_neg) + 0.5 P(equal)`` over all positive/negative
    pairs, computed from mid-ranks. PD is the positive class.

    :raises ValueError: only one class present
    """
    s = np.asarray(scores, dtype="float64")
    pos = np.array([Label.parse(v) is Label.PD for v in labels], dtype=bool)
    if s.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = pos.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both positive and negative samples")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def sensitivity(self) -> float:
        return self.tp / self.positives if self.positives else math.nan

    @property
    def specificity(self) -> float:
        return self.tn / self.negatives if self.negatives else math.nan

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.positives + self.negatives)


def confusion_metrics(results: Iterable[VotingResult], truth: Mapping[str, Any]) -> ConfusionMetrics:
    """
    Patient level confusion counts.

    :raises ValueError: empty input or a patient missing from ``truth``
    """
    tp = fn = tn = fp = 0
    n = 0
    for r in results:
        if r.patient_id not in truth:
            raise ValueError(f"Unknown patient {r.patient_id!r}")
        actual = Label.parse(truth[r.patient_id])
        n += 1
        if actual is Label.PD:
            if r.label is Label.PD:
                tp += 1
            else:
                fn += 1
        elif r.label is Label.HP:
            tn += 1
        else:
            fp += 1
    if n == 0:
        raise ValueError("No voting results")
    return ConfusionMetrics(tp, fn, tn, fp)


@dataclass
class FoldMetrics:
    fold: int
    single_sample_accuracy: float
    voting_accuracy: float
    voting_roc_auc: float
    sensitivity: float
    specificity: float

    def values(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in TABLE_COLUMNS}


@dataclass
class VoteRow:
    """Row of the per-patient voting table."""

    patient_id: str
    fold: int
    group: str
    hy_grade: MaybeInt
    certainty: float
    label: str
    votes_pd: int
    votes_total: int


@dataclass(eq=False)
class MetricsReport:
    """Per-fold metrics and their means for one training configuration."""

    configuration: str
    folds: List[FoldMetrics]
    votes: List[VoteRow] = field(default_factory=list)
    logs: List[TrainingLog] = field(default_factory=list)

    def mean(self) -> Dict[str, float]:
        """Arithmetic mean over folds, folds with an undefined value are skipped."""
        out = {}
        for k in TABLE_COLUMNS:
            vals = [getattr(f, k) for f in self.folds if not math.isnan(getattr(f, k))]
            out[k] = float(np.mean(vals)) if vals else math.nan
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = [{"configuration": self.configuration, "fold": str(f.fold), **f.values()} for f in self.folds]
        rows.append({"configuration": self.configuration, "fold": "mean", **self.mean()})
        return pd.DataFrame(rows).rename(columns=TABLE_COLUMNS)

    def votes_frame(self) -> pd.DataFrame:
        cols = [f for f in VoteRow.__dataclass_fields__]  # pylint: disable=no-member
        df = pd.DataFrame([asdict(v) for v in self.votes], columns=cols)
        df["hy_grade"] = df["hy_grade"].astype("Int64")
        return df

    def to_dict(self, prov: Optional[Provenance] = None) -> Dict[str, Any]:
        def _clean(d: Dict[str, float]) -> Dict[str, Optional[float]]:
            return {k: (None if math.isnan(v) else v) for k, v in d.items()}

        doc: Dict[str, Any] = {
            "configuration": self.configuration,
            "folds": [{"fold": f.fold, **_clean(f.values())} for f in self.folds],
            "mean": _clean(self.mean()),
        }
        if prov is not None:
            doc["provenance"] = prov.as_dict()
        return doc

    def to_json(self, prov: Optional[Provenance] = None) -> str:
        return json.dumps(self.to_dict(prov), indent=2, sort_keys=True)


def predict_samples(
    dataset: Dataset,
    params: ModelParams,
    config: ModelConfig,
    feature_cache: Optional[FeatureCache] = None,
) -> List[Prediction]:
    """
    Single-sample predictions in dataset order.

    There is no augmentation on this path.
    """
    waves = [s.waveform for s in dataset.samples]
    if params.conv.frozen and feature_cache is not None:
        feats = feature_cache.features(waves, [s.key for s in dataset.samples], params, config)
        out: List[Optional[Prediction]] = [None] * len(waves)
        groups: Dict[int, List[int]] = {}
        for i, f in enumerate(feats):
            groups.setdefault(f.shape[0], []).append(i)
        for idx in groups.values():
            for i, p in zip(idx, predict_features(np.stack([feats[i] for i in idx]), params)):
                out[i] = p
        return [p for p in out if p is not None]
    return predict_batch(waves, params, config)


def evaluate_fold(
    test: Dataset,
    params: ModelParams,
    config: ModelConfig,
    fold: int = 0,
    feature_cache: Optional[FeatureCache] = None,
) -> Tuple[FoldMetrics, List[VoteRow]]:
    """Metrics for one held-out fold."""
    preds = predict_samples(test, params, config, feature_cache)
    correct = sum(1 for s, p in zip(test.samples, preds) if s.label is p.label)
    single = correct / len(preds)

    by_patient: Dict[str, List[Prediction]] = {}
    for s, p in zip(test.samples, preds):
        by_patient.setdefault(s.patient_id, []).append(p)

    info = {pid: (lbl, hy) for pid, lbl, hy in test.patients()}
    results = [vote(ps, pid) for pid, ps in by_patient.items()]
    truth = {pid: lbl for pid, (lbl, _) in info.items()}
    cm = confusion_metrics(results, truth)

    labels = [truth[r.patient_id] for r in results]
    try:
        auc = roc_auc([r.certainty for r in results], labels)
    except ValueError:
        warnings.warn(f"Fold {fold} has a single class, ROC AUC is undefined")
        auc = math.nan

    rows = [
        VoteRow(
            r.patient_id,
            fold,
            info[r.patient_id][0].name,
            info[r.patient_id][1],
            r.certainty,
            r.label.name,
            r.votes_pd,
            r.votes_total,
        )
        for r in results
    ]
    metrics = FoldMetrics(fold, single, cm.accuracy, auc, cm.sensitivity, cm.specificity)
    return metrics, rows


def cross_validate(
    dataset: Dataset,
    train_config: TrainConfig,
    model_config: ModelConfig,
    k: int = 5,
    conv: Optional[ConvStackParams] = None,
    noise_corpus: Optional[Sequence[AudioClip]] = None,
    threads: int = 1,
    trace: Optional[IO[str]] = None,
) -> MetricsReport:
    """
    Stratified patient-level k-fold cross-validation.

    Every fold starts from the same initial parameters derived from
    ``train_config.seed``, trains on the other folds with augmentation and
    evaluates the held-out fold without it.

    :param conv: Pretrained conv stack, random initialisation when ``None``
    :param threads: Folds run concurrently when greater than one
    :param trace: Receives the augmentation trace of every fold, in fold order
    """
    folds = stratified_group_kfold(dataset.patients(), k, train_config.seed)
    frozen = not train_config.configuration.conv_trainable
    shared_cache = FeatureCache() if threads <= 1 else None

    def _run(fold: int) -> Tuple[FoldMetrics, List[VoteRow], TrainingLog, str]:
        cache = shared_cache if shared_cache is not None else FeatureCache()
        tr = dataset.subset(folds.train_patients(fold))
        te = dataset.subset(folds.test_patients(fold))
        _LOG.info("Fold %d/%d: %d train / %d test samples", fold + 1, k, len(tr), len(te))
        init = ModelParams.initialize(model_config, train_config.seed, conv=conv, frozen=frozen)
        buf = io.StringIO() if trace is not None else None
        params, log = train(
            tr,
            init,
            train_config,
            model_config,
            noise_corpus=noise_corpus,
            feature_cache=cache,
            trace=buf,
            trace_tags={"fold": fold},
        )
        metrics, rows = evaluate_fold(te, params, model_config, fold, cache if params.conv.frozen else None)
        return metrics, rows, log, "" if buf is None else buf.getvalue()

    results = parallel_map(_run, list(range(k)), threads=threads)
    report = MetricsReport(train_config.configuration.value, [])
    for metrics, rows, log, lines in results:
        report.folds.append(metrics)
        report.votes.extend(rows)
        report.logs.append(log)
        if trace is not None:
            trace.write(lines)
    return report
