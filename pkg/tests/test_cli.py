import json
import re

import pandas as pd
import pytest

from voicepd._output import read_csv
from voicepd.audio_io import read_wav
from voicepd.augment import AugmentationConfig
from voicepd.cli import EXIT_INVALID, EXIT_OK, main, parse_lr
from voicepd.data import published_survey_table
from voicepd.evaluation import TABLE_COLUMNS
from voicepd.manifest import load_manifest
from voicepd.synth import SynthConfig, synth_generate

# pylint: disable=redefined-outer-name

SMALL = ["--model-scale", "small", "--epochs", "1", "--batch", "4"]


@pytest.fixture(scope="module")
def evaluated(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("evaluate")
    argv = ["evaluate", "--manifest", str(tiny_corpus), "--out", str(out), "--folds", "2", "--seed", "1", *SMALL]
    argv += ["--trace-augment"]
    rc = main([*argv, "--configuration", "full-scratch"])
    return rc, out, argv


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_INVALID
    assert main(["bogus"]) == EXIT_INVALID
    assert main(["--version"]) == EXIT_OK
    assert main(["train", "--manifest", "m.csv", "--out", str(tmp_path), "--lr", "-1"]) == EXIT_INVALID
    assert main(["survey", "--out", str(tmp_path), "--threads", "0"]) == EXIT_INVALID
    assert main(["train", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_INVALID


def test_parse_lr():
    assert parse_lr("conventional") == 1e-4
    assert parse_lr("Literal") == 1e-3
    assert parse_lr("3e-4") == 3e-4


def test_survey(tmp_path, capsys):
    assert main(["survey", "--out", str(tmp_path)]) == EXIT_OK
    table = read_csv(tmp_path / "survey_table.csv", dtype=str)
    assert len(table) == 24
    assert list(table["Mode(s)"]) == list(published_survey_table().modes)

    assert (tmp_path / "survey_accuracy.csv").read_text().startswith("# voicepd ")
    out = capsys.readouterr().out
    assert "binary mode accuracy (strict): 0.6250" in out
    assert "binary mode accuracy (count_half): 0.6875" in out


def test_synth_seed_env(tmp_path, monkeypatch):
    argv = ["--n-pd", "1", "--n-hp", "1", "--samples", "2", "--duration", "0.2"]
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "3", *argv]) == EXIT_OK
    records = load_manifest(tmp_path / "a" / "manifest.csv")
    assert [len(r.samples) for r in records] == [2, 2]

    monkeypatch.setenv("VOICEPD_SEED", "3")
    assert main(["synth", "--out", str(tmp_path / "b"), *argv]) == EXIT_OK
    for rec in records:
        for s in rec.samples:
            other = tmp_path / "b" / s.path.relative_to(tmp_path / "a")
            assert other.read_bytes() == s.path.read_bytes()

    monkeypatch.setenv("VOICEPD_SEED", "many")
    assert main(["synth", "--out", str(tmp_path / "c"), *argv]) == EXIT_INVALID


def test_preprocess(tmp_path):
    cfg = SynthConfig(n_pd=1, n_hp=1, samples_per_patient=2, duration_range=(0.2, 0.2), stereo=True)
    manifest = synth_generate(cfg, tmp_path / "raw")
    out = tmp_path / "clean"
    assert main(["preprocess", "--manifest", str(manifest), "--out", str(out)]) == EXIT_OK

    records = load_manifest(out / "manifest.csv")
    assert len(records) == 2
    for rec in records:
        for s in rec.samples:
            clip = read_wav(s.path)
            assert (clip.channels, clip.sample_rate, clip.num_samples) == (1, 16_000, 3200)
    assert not (out / "failures.csv").exists()


def test_preprocess_failures(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file at all")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("patient_id,group,hy_grade,file,utterance_type,duration\nA,HP,,bad.wav,vowel,1.0\n")
    out = tmp_path / "out"
    assert main(["preprocess", "--manifest", str(manifest), "--out", str(out)]) == EXIT_INVALID
    failures = read_csv(out / "failures.csv")
    assert list(failures.patient_id) == ["A"]


def test_preprocess_broken_header(tone_wav, tmp_path):
    (tmp_path / "broken.wav").write_bytes(b"garbage")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(
        "patient_id,group,hy_grade,file,utterance_type\n"
        f"A,PD,2,{tone_wav.name},vowel\n"
        "B,HP,,broken.wav,vowel\n"
    )
    out = tmp_path / "out"
    assert main(["preprocess", "--manifest", str(manifest), "--out", str(out), "--seed", "4"]) == EXIT_INVALID

    failures = read_csv(out / "failures.csv")
    assert list(failures.patient_id) == ["B"]
    assert failures.file[0].endswith("broken.wav")
    assert (out / "failures.csv").read_text().startswith("# voicepd ")

    (rec,) = load_manifest(out / "manifest.csv")
    assert rec.patient_id == "A"
    assert rec.samples[0].duration == pytest.approx(0.5)
    assert (out / "manifest.csv").read_text().startswith("# voicepd ")
    assert "seed=4" in (out / "manifest.csv").read_text().splitlines()[0]


def test_evaluate(evaluated, tmp_path):
    rc, out, argv = evaluated
    assert rc == EXIT_OK

    metrics = read_csv(out / "metrics.csv")
    for col in TABLE_COLUMNS.values():
        assert col in metrics.columns
    assert list(metrics.fold.astype(str)) == ["0", "1", "mean"]
    assert set(metrics.configuration) == {"full_scratch"}

    votes = read_csv(out / "votes.csv")
    assert sorted(votes.patient_id) == ["HP1", "HP2", "PD1", "PD2"]
    assert votes.certainty.between(0, 1).all()
    assert (out / "voting-full_scratch.svg").exists()
    assert (out / "training_log.csv").exists()

    # one epoch, every sample trains in exactly one of the two folds
    trace = [json.loads(line) for line in (out / "augment_trace-full_scratch.jsonl").read_text().splitlines()]
    assert len(trace) == 16
    assert [d["fold"] for d in trace] == sorted(d["fold"] for d in trace)

    doc = json.loads((out / "metrics.json").read_text())
    assert doc["provenance"]["seed"] == 1
    assert doc["reports"][0]["configuration"] == "full_scratch"

    # identical inputs and seed give identical bytes
    again = tmp_path / "again"
    argv = [*argv[:4], str(again), *argv[5:]]
    assert main([*argv, "--configuration", "full-scratch"]) == EXIT_OK
    assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
    assert (again / "votes.csv").read_bytes() == (out / "votes.csv").read_bytes()


def test_frozen_needs_weights(tiny_corpus, tmp_path, capsys):
    argv = ["evaluate", "--manifest", str(tiny_corpus), "--out", str(tmp_path), "--folds", "2", *SMALL]
    assert main(argv) == EXIT_INVALID
    assert "weights" in capsys.readouterr().err
    argv = ["train", "--manifest", str(tiny_corpus), "--out", str(tmp_path), "--configuration", "full-pretrained"]
    assert main([*argv, *SMALL]) == EXIT_INVALID


def test_train_infer(tiny_corpus, tmp_path):
    out = tmp_path / "run"
    argv = ["train", "--manifest", str(tiny_corpus), "--out", str(out), "--allow-random-conv", "--trace-augment"]
    argv += SMALL
    assert main(argv) == EXIT_OK
    for name in ("model.vpdm", "training_log.csv", "loss.svg", "augment_trace.jsonl"):
        assert (out / name).exists()
    lines = (out / "augment_trace.jsonl").read_text().splitlines()
    assert len(lines) == 16

    inf = tmp_path / "infer"
    argv = ["infer", "--checkpoint", str(out / "model.vpdm"), "--manifest", str(tiny_corpus), "--out", str(inf)]
    assert main(argv) == EXIT_OK
    df = read_csv(inf / "inference.csv")
    assert list(df.patient_id) == ["PD1", "PD2", "HP1", "HP2"]
    assert (df.votes_total == 4).all()
    assert ((df.certainty >= 0.5) == (df.label == "PD")).all()


def test_viz_voting(tmp_path):
    votes = tmp_path / "votes.csv"
    pd.DataFrame(
        {
            "patient_id": ["a", "b", "c"],
            "group": ["PD", "PD", "HP"],
            "hy_grade": [2, 4, None],
            "certainty": [0.4, 0.9, 0.1],
        }
    ).to_csv(votes, index=False)
    svg = tmp_path / "voting.svg"
    assert main(["viz", "voting", "--votes", str(votes), "--out", str(svg)]) == EXIT_OK
    txt = svg.read_text()
    assert txt.count("<circle") == 3
    assert "stroke-dasharray" in txt
    assert re.findall(r">(HP|HY\d)<", txt) == ["HP", "HY2", "HY4"]

    empty = tmp_path / "empty.csv"
    empty.write_text("patient_id,group,hy_grade,certainty\n")
    svg2 = tmp_path / "empty.svg"
    assert main(["viz", "voting", "--votes", str(empty), "--out", str(svg2)]) == EXIT_INVALID
    assert not svg2.exists()


def test_viz_featuremap(tone_wav, tmp_path):
    svg = tmp_path / "fmap.svg"
    assert main(["viz", "featuremap", "--wav", str(tone_wav), "--model-scale", "small", "--out", str(svg)]) == EXIT_OK
    txt = svg.read_text()
    assert "feature map (32 channels)" in txt
    assert "<!-- voicepd " in txt

    assert main(["viz", "featuremap", "--out", str(svg)]) == EXIT_INVALID


def test_augment_preview(tone_wav, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"augment": AugmentationConfig.disabled().to_dict()}))
    out = tmp_path / "preview"
    assert main(["augment-preview", "--wav", str(tone_wav), "--config", str(cfg), "--out", str(out)]) == EXIT_OK

    traces = re.findall(r'points="([^"]*)"', (out / "waveform.svg").read_text())
    assert len(traces) == 2
    assert traces[0] == traces[1]
    doc = json.loads((out / "augmentations.json").read_text())
    assert doc["augmentations"]["background"] is False

    cfg.write_text(json.dumps({"augmentation": {}}))
    assert main(["augment-preview", "--wav", str(tone_wav), "--config", str(cfg), "--out", str(out)]) == EXIT_INVALID
