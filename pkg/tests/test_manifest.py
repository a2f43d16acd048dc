import json
import warnings

import pytest

from voicepd._output import Provenance
from voicepd.data import HY_DISTRIBUTION, catalog_utterances, phonetic_catalog
from voicepd.manifest import (
    ManifestError,
    PatientRecord,
    SampleEntry,
    group_counts,
    load_dataset,
    load_manifest,
    manifest_to_json,
    write_manifest,
)
from voicepd.testutils import cohort_population
from voicepd.types import Label, UtteranceType

HEADER = "patient_id,group,hy_grade,file,utterance_type,duration\n"


def _write(tmp_path, body, header=HEADER):
    path = tmp_path / "manifest.csv"
    path.write_text(header + body, encoding="utf8")
    return path


def test_catalog():
    cat = phonetic_catalog()
    assert cat is phonetic_catalog()
    vowels = [e for e in cat if e.utterance_type is UtteranceType.VOWEL]
    assert [e.text for e in vowels] == ["a", "e", "i", "u"]
    assert all(e.repetitions == 3 for e in vowels)

    sentences = [e for e in cat if e.utterance_type is UtteranceType.SENTENCE]
    assert [e.repetitions for e in sentences] == [3, 1, 1, 1, 1]
    assert sentences[0].text == "Dziś jest ładna pogoda."
    assert "igła" in [e.text for e in cat]

    assert len(catalog_utterances()) == 46


def test_cohort_manifest(tmp_path):
    rows = []
    for pid, group, hy in cohort_population():
        rows.append(f"{pid},{group.name},{'' if hy is None else hy},{pid}.wav,sentence,2.5\n")
    records = load_manifest(_write(tmp_path, "".join(rows)), check_files=False)
    assert len(records) == 48
    assert group_counts(records) == {"PD": 38, "HP": 10}

    strata = {}
    for rec in records:
        strata[rec.stratum] = strata.get(rec.stratum, 0) + 1
    assert strata == HY_DISTRIBUTION


@pytest.mark.parametrize(
    "body, match",
    [
        ("A,PD,,a.wav,vowel,1\n", "row 1"),
        ("A,PD,2,a.wav,vowel,1\nB,HP,1,b.wav,vowel,1\n", "row 2"),
        ("A,PD,7,a.wav,vowel,1\n", "1..5"),
        ("A,PD,2.5,a.wav,vowel,1\n", "integer"),
        ("A,XX,,a.wav,vowel,1\n", "group"),
        ("A,PD,2,a.wav,hum,1\n", "utterance"),
        ("A,PD,2,a.wav,vowel,1\nA,PD,2,a.wav,word,1\n", "duplicate"),
        ("A,PD,2,a.wav,vowel,1\nA,PD,3,b.wav,vowel,1\n", "inconsistent"),
        ("A,PD,2,a.wav,vowel,0\n", "duration"),
        (",PD,2,a.wav,vowel,1\n", "patient_id"),
    ],
)
def test_manifest_errors(tmp_path, body, match):
    with pytest.raises(ManifestError, match=match):
        load_manifest(_write(tmp_path, body), check_files=False)


def test_manifest_structure_errors(tmp_path):
    with pytest.raises(ManifestError, match="missing columns"):
        load_manifest(_write(tmp_path, "A,PD,a.wav\n", header="patient_id,group,file\n"))
    with pytest.raises(ManifestError, match="no samples"):
        load_manifest(_write(tmp_path, ""))
    with pytest.raises(ManifestError, match="dangling") as e:
        load_manifest(_write(tmp_path, "A,PD,2,nope.wav,vowel,1\n"))
    assert e.value.row == 1

    # no duration column and no file to measure
    with pytest.raises(ManifestError):
        load_manifest(_write(tmp_path, "A,HP,,a.wav,word\n", header=HEADER[:-10] + "\n"), check_files=False)

    with pytest.raises(ValueError):
        PatientRecord("A", Label.HP, 2)
    with pytest.raises(ValueError):
        SampleEntry(tmp_path / "a.wav", UtteranceType.WORD, -1.0)


def test_manifest_round_trip(tiny_corpus, tmp_path):
    records = load_manifest(tiny_corpus)
    assert [r.patient_id for r in records] == ["PD1", "PD2", "HP1", "HP2"]
    assert all(len(r.samples) == 4 for r in records)
    assert all(s.duration == pytest.approx(0.3) for r in records for s in r.samples)
    assert records[2].hy_grade is None
    assert records[0].samples[0].text == "a"

    again = load_manifest(write_manifest(records, tmp_path / "copy.csv"))
    assert again == records

    doc = json.loads(manifest_to_json(records))
    assert [d["patient_id"] for d in doc] == ["PD1", "PD2", "HP1", "HP2"]
    assert doc[0]["samples"][0]["utterance_type"] == "vowel"
    assert doc[3]["hy_grade"] is None


def test_duration_from_header(tiny_corpus, tmp_path):
    rec = load_manifest(tiny_corpus)[0]
    fname = rec.samples[0].path
    path = _write(tmp_path, f"X,PD,{rec.hy_grade},{fname},vowel\n", header=HEADER[:-10] + "\n")
    (loaded,) = load_manifest(path)
    assert loaded.samples[0].duration == pytest.approx(0.3)


def test_deferred_durations(tmp_path):
    (tmp_path / "broken.wav").write_bytes(b"garbage")
    path = _write(tmp_path, "X,HP,,broken.wav,vowel\n", header=HEADER[:-10] + "\n")
    with pytest.raises(ManifestError, match="row 1"):
        load_manifest(path)

    (rec,) = load_manifest(path, read_durations=False)
    assert rec.samples[0].duration is None

    copy = write_manifest([rec], tmp_path / "copy.csv", Provenance(3, "cafe"))
    assert copy.read_text(encoding="utf8").startswith("# voicepd ")
    assert load_manifest(copy, read_durations=False) == [rec]


def test_load_dataset(tiny_corpus):
    records = load_manifest(tiny_corpus)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ds = load_dataset(records)
    assert len(ds) == 16
    assert ds.sample_rate == 16_000
    assert all(s.waveform.shape == (4800,) for s in ds.samples)
    assert all(abs(s.waveform).max() == pytest.approx(1.0, abs=1e-3) for s in ds.samples)

    assert ds.patients()[0] == ("PD1", Label.PD, records[0].hy_grade)
    assert ds.truth() == {"PD1": Label.PD, "PD2": Label.PD, "HP1": Label.HP, "HP2": Label.HP}
    sub = ds.subset(["HP2"])
    assert len(sub) == 4
    assert {s.patient_id for s in sub.samples} == {"HP2"}

    threaded = load_dataset(records, threads=2)
    for a, b in zip(ds.samples, threaded.samples):
        assert (a.waveform == b.waveform).all()

    with pytest.warns(UserWarning, match="Dropped 16"):
        with pytest.raises(ValueError, match="empty"):
            load_dataset(records, min_samples=5000)
