"""
Dataset manifest: which recording belongs to which patient.

One CSV row per sample with columns ``patient_id, group, hy_grade, file,
utterance_type`` and optionally ``duration`` and ``text``. Relative file
paths are resolved against the manifest location.
"""
from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.io import wavfile

from ._dask import parallel_map
from ._output import Provenance, write_csv
from .audio_io import TARGET_RATE, preprocess, read_wav
from .types import Label, MaybeInt, SomePath, UtteranceType

__all__ = [
    "ManifestError",
    "SampleEntry",
    "PatientRecord",
    "Sample",
    "Dataset",
    "load_manifest",
    "write_manifest",
    "manifest_to_json",
    "group_counts",
    "load_dataset",
]

_LOG = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("patient_id", "group", "hy_grade", "file", "utterance_type")
OPTIONAL_COLUMNS = ("duration", "text")


class ManifestError(ValueError):
    """Invalid manifest content, message names the 1-based data row when known."""

    def __init__(self, msg: str, row: MaybeInt = None):
        self.row = row
        super().__init__(msg if row is None else f"row {row}: {msg}")


@dataclass(frozen=True)
class SampleEntry:
    """One recording of a patient."""

    path: Path
    utterance_type: UtteranceType
    duration: Optional[float]
    text: str = ""

    def __post_init__(self) -> None:
        # None: not read yet
        if self.duration is not None and not self.duration > 0:
            raise ValueError(f"{self.path}: duration must be positive, got {self.duration}")


@dataclass
class PatientRecord:
    """
    Patient with all its samples.

    ``hy_grade`` (1-5) is present exactly for PD patients.
    """

    patient_id: str
    group: Label
    hy_grade: Optional[int]
    samples: List[SampleEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.group is Label.PD:
            if self.hy_grade is None or not 1 <= self.hy_grade <= 5:
                raise ValueError(f"{self.patient_id}: PD patient needs hy_grade in 1..5, got {self.hy_grade}")
        elif self.hy_grade is not None:
            raise ValueError(f"{self.patient_id}: HP patient must not have hy_grade")

    @property
    def stratum(self) -> str:
        """``"HP"`` or ``"HY<grade>"``."""
        return "HP" if self.hy_grade is None else f"HY{self.hy_grade}"


def _wav_duration(path: Path) -> float:
    rate, data = wavfile.read(path, mmap=True)
    return data.shape[0] / rate


def _parse_hy(txt: str) -> MaybeInt:
    txt = txt.strip()
    if txt == "":
        return None
    v = float(txt)
    if v != int(v):
        raise ValueError(f"hy_grade must be an integer, got {txt!r}")
    return int(v)


def _leading_comments(path: Path) -> int:
    n = 0
    with open(path, "rt", encoding="utf8") as src:
        for line in src:
            if not line.startswith("#"):
                break
            n += 1
    return n


def load_manifest(path: SomePath, check_files: bool = True, read_durations: bool = True) -> List[PatientRecord]:
    """
    Load and validate a manifest CSV.

    Patients keep the order of their first appearance, samples keep file
    order. Leading ``#`` lines (provenance) are skipped.

    :param check_files: Require every referenced file to exist
    :param read_durations: Read durations missing from the CSV from the WAV
                           header, otherwise leave them as ``None``
    :raises ManifestError: missing columns, bad group/hy_grade combination,
                           duplicate ``(patient, file)``, dangling path,
                           unreadable WAV header
    """
    path = Path(path)
    base = path.parent
    df = pd.read_csv(
        path, dtype=str, keep_default_na=False, encoding="utf8", skiprows=_leading_comments(path)
    )
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")
    if len(df) == 0:
        raise ManifestError(f"{path}: no samples")

    records: Dict[str, PatientRecord] = {}
    seen = set()
    for i, row in enumerate(df.itertuples(index=False), start=1):
        try:
            pid = str(row.patient_id).strip()
            if not pid:
                raise ValueError("empty patient_id")
            group = Label.parse(row.group)
            hy = _parse_hy(row.hy_grade)
            if group is Label.PD and hy is None:
                raise ValueError("PD without hy_grade")
            if group is Label.HP and hy is not None:
                raise ValueError("HP with hy_grade")
            if hy is not None and not 1 <= hy <= 5:
                raise ValueError(f"hy_grade must be in 1..5, got {hy}")
            utype = UtteranceType.parse(row.utterance_type)
        except ValueError as e:
            raise ManifestError(str(e), row=i) from None

        fname = Path(str(row.file))
        fpath = fname if fname.is_absolute() else (base / fname)
        fpath = Path(fpath.resolve()) if check_files else fpath
        if (pid, str(fpath)) in seen:
            raise ManifestError(f"duplicate sample {pid}, {row.file}", row=i)
        seen.add((pid, str(fpath)))

        if check_files and not fpath.exists():
            raise ManifestError(f"dangling file path {row.file}", row=i)

        dur_txt = str(getattr(row, "duration", "")).strip()
        duration: Optional[float] = None
        try:
            if dur_txt:
                duration = float(dur_txt)
            elif check_files and read_durations:
                duration = _wav_duration(fpath)
            elif read_durations:
                raise ValueError("duration column missing and file checks disabled")
            entry = SampleEntry(fpath, utype, duration, str(getattr(row, "text", "")))
        except ValueError as e:
            raise ManifestError(str(e), row=i) from None

        rec = records.get(pid)
        if rec is None:
            records[pid] = PatientRecord(pid, group, hy, [entry])
        else:
            if rec.group is not group or rec.hy_grade != hy:
                raise ManifestError(f"patient {pid} has inconsistent group/hy_grade", row=i)
            rec.samples.append(entry)

    _LOG.info("Loaded manifest %s: %d patients", path, len(records))
    return list(records.values())


def _records_frame(records: Sequence[PatientRecord], base: Optional[Path]) -> pd.DataFrame:
    rows = []
    for rec in records:
        for s in rec.samples:
            fpath = s.path
            if base is not None:
                try:
                    fpath = s.path.resolve().relative_to(base)
                except ValueError:
                    pass
            rows.append(
                {
                    "patient_id": rec.patient_id,
                    "group": rec.group.name,
                    "hy_grade": "" if rec.hy_grade is None else str(rec.hy_grade),
                    "file": fpath.as_posix(),
                    "utterance_type": s.utterance_type.value,
                    "duration": "" if s.duration is None else repr(float(s.duration)),
                    "text": s.text,
                }
            )
    return pd.DataFrame(rows, columns=[*REQUIRED_COLUMNS, *OPTIONAL_COLUMNS])


def write_manifest(records: Sequence[PatientRecord], path: SomePath, prov: Optional[Provenance] = None) -> Path:
    """
    Write manifest CSV, file paths relative to the manifest folder when possible.

    With ``prov`` the file starts with a provenance comment line, which
    :py:func:`load_manifest` skips.
    """
    path = Path(path)
    return write_csv(_records_frame(records, path.parent.resolve()), path, prov)


def manifest_to_json(records: Sequence[PatientRecord]) -> str:
    """JSON export, one object per patient."""
    doc = [
        {
            "patient_id": rec.patient_id,
            "group": rec.group.name,
            "hy_grade": rec.hy_grade,
            "samples": [
                {
                    "file": s.path.as_posix(),
                    "utterance_type": s.utterance_type.value,
                    "duration": s.duration,
                    "text": s.text,
                }
                for s in rec.samples
            ],
        }
        for rec in records
    ]
    return json.dumps(doc, indent=2, ensure_ascii=False)


def group_counts(records: Iterable[PatientRecord]) -> Dict[str, int]:
    cc = Counter(rec.group.name for rec in records)
    return dict(cc)


@dataclass(eq=False)
class Sample:
    """Preprocessed recording ready for the model."""

    patient_id: str
    label: Label
    hy_grade: Optional[int]
    waveform: np.ndarray
    key: str
    utterance_type: UtteranceType = UtteranceType.SENTENCE


@dataclass(eq=False)
class Dataset:
    """Flat list of samples, in manifest order."""

    samples: List[Sample]
    sample_rate: int = TARGET_RATE

    def __len__(self) -> int:
        return len(self.samples)

    def patients(self) -> List[Tuple[str, Label, Optional[int]]]:
        """``(patient_id, label, hy_grade)`` in first appearance order."""
        seen: Dict[str, Tuple[str, Label, Optional[int]]] = {}
        for s in self.samples:
            if s.patient_id not in seen:
                seen[s.patient_id] = (s.patient_id, s.label, s.hy_grade)
        return list(seen.values())

    def subset(self, patient_ids: Iterable[str]) -> "Dataset":
        keep = set(patient_ids)
        return Dataset([s for s in self.samples if s.patient_id in keep], self.sample_rate)

    def truth(self) -> Dict[str, Label]:
        return {pid: label for pid, label, _ in self.patients()}


def _load_sample(args: Tuple[PatientRecord, SampleEntry, int]) -> np.ndarray:
    rec, entry, rate = args
    clip = preprocess(read_wav(entry.path), rate, warn_mono=False)
    return clip.waveform


def load_dataset(
    records: Sequence[PatientRecord],
    sample_rate: int = TARGET_RATE,
    min_samples: int = 0,
    threads: int = 1,
) -> Dataset:
    """
    Read and preprocess every sample of a manifest.

    Samples shorter than ``min_samples`` after resampling are dropped with a
    warning.
    """
    jobs = [(rec, s, sample_rate) for rec in records for s in rec.samples]
    waves = parallel_map(_load_sample, jobs, threads=threads)

    samples = []
    dropped = 0
    for (rec, entry, _), w in zip(jobs, waves):
        if w.shape[0] < min_samples:
            dropped += 1
            continue
        samples.append(Sample(rec.patient_id, rec.group, rec.hy_grade, w, str(entry.path), entry.utterance_type))
    if dropped:
        warnings.warn(f"Dropped {dropped} samples shorter than {min_samples} samples")
    if not samples:
        raise ValueError("Dataset is empty")
    return Dataset(samples, sample_rate)
