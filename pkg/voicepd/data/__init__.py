"""
Bundled reference data.

Phonetic test inventory, questionnaire answer fixtures and the published
questionnaire summary.
"""
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

import pandas as pd

from ..types import UtteranceType


def data_path(fname: Optional[str] = None) -> Path:
    """Location of data folder or file within."""
    prefix = Path(__file__).parent
    if fname is None:
        return prefix
    return prefix / fname


class CatalogEntry(NamedTuple):
    utterance_type: UtteranceType
    text: str
    repetitions: int


@lru_cache
def phonetic_catalog() -> Tuple[CatalogEntry, ...]:
    """
    Utterances of the phonetic test, in reading order.

    Four vowels, four sustained vowels and five words three times each, the
    first sentence three times and four more sentences once.
    """
    df = pd.read_csv(data_path("phonetic_catalog.csv"), dtype=str, keep_default_na=False, encoding="utf8")
    return tuple(
        CatalogEntry(UtteranceType.parse(r.utterance_type), r.text, int(r.repetitions))
        for r in df.itertuples(index=False)
    )


def catalog_utterances() -> Tuple[Tuple[UtteranceType, str], ...]:
    """Catalog expanded by repetition count: one item per recording."""
    return tuple((e.utterance_type, e.text) for e in phonetic_catalog() for _ in range(e.repetitions))


def survey_answers_path() -> Path:
    return data_path("survey_answers.csv")


def survey_truth_path() -> Path:
    return data_path("survey_truth.csv")


@lru_cache
def published_survey_table() -> pd.DataFrame:
    """Published per-subject questionnaire summary (modes, average, hit)."""
    return pd.read_csv(data_path("survey_published.csv"), dtype={"modes": str, "hit": str})


# Patient counts per stratum of the clinical cohort
HY_DISTRIBUTION = {"HY5": 1, "HY4": 11, "HY3": 13, "HY2": 11, "HY1": 2, "HP": 10}
