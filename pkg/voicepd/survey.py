"""
Expert questionnaire scoring.

Experts rate each subject on a four option scale:

* ``1`` no symptoms
* ``2`` symptoms other than PD
* ``3`` early-stage PD
* ``4`` advanced-stage PD

Per subject we report the mode(s), the average and whether any expert gave
the true answer (a *hit*). For the binary PD task ratings ``{1, 2}`` count as
non-PD and ``{3, 4}`` as PD.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .types import Label, MaybeInt, SomePath

__all__ = [
    "ExpertAnswer",
    "SubjectSummary",
    "TieRule",
    "summarize",
    "truth_set",
    "hit",
    "binary_mode_accuracy",
    "per_set_accuracy",
    "load_answers",
    "load_truth",
    "survey_table",
    "summarize_all",
    "accuracy_report",
    "SET_NAMES",
]

RATINGS = (1, 2, 3, 4)
PD_RATINGS = frozenset((3, 4))

SET_NAMES = {
    1: "all types of recordings",
    2: "only full sentences",
    3: "words and syllables",
    4: "vowels and sustained phonation",
}


class TieRule(str, Enum):
    """
    How subjects whose modes span both binary classes are scored.

    * ``strict``: counted wrong
    * ``count_half``: half credit
    * ``favor_pd``: resolved as PD
    * ``drop``: excluded from the denominator
    """

    STRICT = "strict"
    COUNT_HALF = "count_half"
    FAVOR_PD = "favor_pd"
    DROP = "drop"

    @staticmethod
    def parse(value: Union[str, "TieRule"]) -> "TieRule":
        if isinstance(value, TieRule):
            return value
        try:
            return TieRule(value.strip().lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"Unknown tie rule: {value!r}") from None


@dataclass(frozen=True)
class ExpertAnswer:
    subject_id: int
    expert_id: int
    rating: int
    set_id: MaybeInt = None

    def __post_init__(self) -> None:
        if self.rating not in RATINGS:
            raise ValueError(f"Rating must be one of {RATINGS}, got {self.rating}")


@dataclass(frozen=True)
class SubjectSummary:
    """
    Aggregated answers for one subject.

    ``average`` keeps full precision, :py:attr:`display_average` is rounded to
    one decimal.
    """

    subject_id: int
    modes: FrozenSet[int]
    average: float
    hit: Optional[bool] = None
    true_group: Optional[Label] = None
    true_hy: MaybeInt = None
    set_id: MaybeInt = None

    @property
    def display_average(self) -> str:
        return f"{self.average:.1f}"

    @property
    def modes_text(self) -> str:
        return ", ".join(str(m) for m in sorted(self.modes))

    @property
    def binary_modes(self) -> FrozenSet[Label]:
        return frozenset(Label.PD if m in PD_RATINGS else Label.HP for m in self.modes)


def truth_set(group: Union[Label, str], hy_grade: MaybeInt = None, advanced_from: int = 3) -> FrozenSet[int]:
    """
    Ratings counted as correct for a subject.

    HP maps to ``{1}``; PD maps to ``{3}`` below ``advanced_from`` and to
    ``{4}`` from it on.
    """
    if Label.parse(group) is Label.HP:
        return frozenset((1,))
    if hy_grade is None:
        raise ValueError("PD subject needs a Hoehn-Yahr grade")
    return frozenset((4,)) if hy_grade >= advanced_from else frozenset((3,))


def _ratings(answers: Iterable[Union[ExpertAnswer, int]]) -> List[int]:
    return [a.rating if isinstance(a, ExpertAnswer) else int(a) for a in answers]


def hit(answers: Iterable[Union[ExpertAnswer, int]], truth: Iterable[int]) -> bool:
    """True iff any rating is in ``truth``."""
    tt = set(truth)
    return any(r in tt for r in _ratings(answers))


def summarize(
    answers: Sequence[Union[ExpertAnswer, int]],
    subject_id: int = 0,
    group: Optional[Union[Label, str]] = None,
    hy_grade: MaybeInt = None,
    advanced_from: int = 3,
) -> SubjectSummary:
    """
    Mode(s), average and optionally hit for one subject.

    All most frequent ratings are reported when counts tie.

    :raises ValueError: no answers
    """
    ratings = _ratings(answers)
    if not ratings:
        raise ValueError(f"No answers for subject {subject_id}")
    for r in ratings:
        if r not in RATINGS:
            raise ValueError(f"Rating must be one of {RATINGS}, got {r}")
    counts = Counter(ratings)
    top = max(counts.values())
    modes = frozenset(r for r, c in counts.items() if c == top)
    set_ids = {a.set_id for a in answers if isinstance(a, ExpertAnswer)}
    set_id = set_ids.pop() if len(set_ids) == 1 else None

    label = None if group is None else Label.parse(group)
    h = None
    if label is not None:
        h = hit(ratings, truth_set(label, hy_grade, advanced_from))
    return SubjectSummary(
        subject_id,
        modes,
        float(np.mean(ratings)),
        hit=h,
        true_group=label,
        true_hy=hy_grade if label is Label.PD else None,
        set_id=set_id,
    )


def _score(summary: SubjectSummary, truth: Label, rule: TieRule) -> Optional[float]:
    binary = summary.binary_modes
    if len(binary) == 1:
        return 1.0 if truth in binary else 0.0
    if rule is TieRule.STRICT:
        return 0.0
    if rule is TieRule.COUNT_HALF:
        return 0.5
    if rule is TieRule.FAVOR_PD:
        return 1.0 if truth is Label.PD else 0.0
    return None


def binary_mode_accuracy(
    summaries: Iterable[SubjectSummary],
    truths: Optional[Mapping[int, Union[Label, str]]] = None,
    tie_rule: Union[TieRule, str] = TieRule.COUNT_HALF,
) -> float:
    """
    Fraction of subjects whose mode maps to the true binary class.

    :param truths: Subject to true group, taken from the summaries when not given
    :param tie_rule: Scoring of subjects with modes in both classes, see :py:class:`TieRule`
    :raises ValueError: unknown tie rule, subject without truth
    """
    rule = TieRule.parse(tie_rule)
    scores = []
    for s in summaries:
        if truths is not None:
            if s.subject_id not in truths:
                raise ValueError(f"No truth for subject {s.subject_id}")
            truth = Label.parse(truths[s.subject_id])
        elif s.true_group is not None:
            truth = s.true_group
        else:
            raise ValueError(f"No truth for subject {s.subject_id}")
        v = _score(s, truth, rule)
        if v is not None:
            scores.append(v)
    if not scores:
        raise ValueError("No subjects to score")
    return float(sum(scores) / len(scores))


def per_set_accuracy(
    summaries: Iterable[SubjectSummary],
    tie_rule: Union[TieRule, str] = TieRule.COUNT_HALF,
) -> Dict[int, float]:
    """:py:func:`binary_mode_accuracy` per questionnaire set."""
    by_set: Dict[int, List[SubjectSummary]] = {}
    for s in summaries:
        if s.set_id is None:
            raise ValueError(f"Subject {s.subject_id} has no set id")
        by_set.setdefault(s.set_id, []).append(s)
    out = {}
    for set_id in sorted(by_set):
        try:
            out[set_id] = binary_mode_accuracy(by_set[set_id], tie_rule=tie_rule)
        except ValueError:
            out[set_id] = float("nan")
    return out


def load_answers(path: SomePath) -> List[ExpertAnswer]:
    """
    Read ``subject_id, expert_id, rating, set_id`` CSV.

    :raises ValueError: rating out of range, duplicate ``(subject, expert)``
    """
    df = pd.read_csv(path, comment="#")
    missing = {"subject_id", "expert_id", "rating"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    if df.duplicated(["subject_id", "expert_id"]).any():
        dup = df[df.duplicated(["subject_id", "expert_id"])].iloc[0]
        raise ValueError(f"Duplicate answer for subject {dup.subject_id}, expert {dup.expert_id}")
    has_set = "set_id" in df.columns
    return [
        ExpertAnswer(
            int(r.subject_id),
            int(r.expert_id),
            int(r.rating),
            int(r.set_id) if has_set and not pd.isna(r.set_id) else None,
        )
        for r in df.itertuples(index=False)
    ]


def load_truth(path: SomePath) -> Dict[int, Tuple[Label, MaybeInt]]:
    """Read ``subject_id, group, hy_grade`` CSV."""
    df = pd.read_csv(path, comment="#", dtype={"group": str}, keep_default_na=True)
    out = {}
    for r in df.itertuples(index=False):
        hy = None if pd.isna(r.hy_grade) else int(r.hy_grade)
        out[int(r.subject_id)] = (Label.parse(r.group), hy)
    return out


def summarize_all(
    answers: Iterable[ExpertAnswer],
    truth: Mapping[int, Tuple[Label, MaybeInt]],
    advanced_from: int = 3,
) -> List[SubjectSummary]:
    """One summary per subject, ordered by subject id."""
    by_subject: Dict[int, List[ExpertAnswer]] = {}
    for a in answers:
        by_subject.setdefault(a.subject_id, []).append(a)
    out = []
    for sid in sorted(by_subject):
        if sid not in truth:
            raise ValueError(f"No truth for subject {sid}")
        group, hy = truth[sid]
        out.append(summarize(by_subject[sid], sid, group, hy, advanced_from))
    return out


def survey_table(summaries: Sequence[SubjectSummary]) -> pd.DataFrame:
    """Summary table: subject, set, true H-Y, mode(s), average, hit."""
    rows = []
    for s in summaries:
        grp = "?" if s.true_group is None else s.true_group.name
        rows.append(
            {
                "Set": s.set_id,
                "Subject": f"{s.subject_id} ({grp})",
                "True H-Y": "-" if s.true_hy is None else str(s.true_hy),
                "Mode(s)": s.modes_text,
                "Average": s.display_average,
                "Hit": "" if s.hit is None else ("YES" if s.hit else "NO"),
            }
        )
    return pd.DataFrame(rows, columns=["Set", "Subject", "True H-Y", "Mode(s)", "Average", "Hit"])


def accuracy_report(summaries: Sequence[SubjectSummary]) -> pd.DataFrame:
    """Binary mode accuracy per tie rule, overall and per set."""
    rows = []
    has_sets = all(s.set_id is not None for s in summaries)
    for rule in TieRule:
        row = {"tie_rule": rule.value, "accuracy": binary_mode_accuracy(summaries, tie_rule=rule)}
        if has_sets:
            for set_id, acc in per_set_accuracy(summaries, rule).items():
                row[f"set_{set_id}"] = acc
        rows.append(row)
    return pd.DataFrame(rows)
