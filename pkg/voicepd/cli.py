"""
Command line entry point.

Exit codes: ``0`` success, ``1`` validation failure (bad arguments, config,
manifest or weights), ``2`` any other runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from ._output import Provenance, read_csv, write_csv
from ._version import __version__
from .audio_io import TARGET_RATE, preprocess, read_wav, write_wav
from .augment import AugmentationConfig, apply_pipeline, load_noise_corpus
from .data import survey_answers_path, survey_truth_path
from .evaluation import MetricsReport, cross_validate, predict_samples, vote
from .features import ConvStackParams, SpectrogramConfig, featuremap_comparison, load_weights
from .manifest import PatientRecord, SampleEntry, load_dataset, load_manifest, write_manifest
from .math import config_hash, derive_rng
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .plots import featuremap_svg, loss_svg, save_svg, voting_svg, waveform_svg
from .survey import accuracy_report, load_answers, load_truth, summarize_all, survey_table
from .synth import SynthConfig, synth_generate
from .train import LR_CONVENTIONAL, LR_LITERAL, TrainConfig, train
from .types import TrainingMode

# pylint: disable=too-many-locals

_LOG = logging.getLogger(__name__)

SEED_ENV = "VOICEPD_SEED"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

MODEL_SCALES = {
    "full": dict(conv_channels=512, hidden_size=256, head_hidden=128),
    "small": dict(conv_channels=32, hidden_size=16, head_hidden=16),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def parse_lr(txt: str) -> float:
    """Number, or ``conventional`` (1e-4) / ``literal`` (1e-3)."""
    named = {"conventional": LR_CONVENTIONAL, "literal": LR_LITERAL}
    key = txt.strip().lower()
    if key in named:
        return named[key]
    try:
        v = float(key)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid learning rate: {txt!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"Learning rate must be positive: {txt!r}")
    return v


@dataclass
class RunConfig:
    """
    Settings of one invocation.

    Loaded from a JSON document, then overridden by command line flags.
    """

    seed: Optional[int] = None
    threads: int = 1
    folds: int = 5
    model_scale: str = "full"
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    augment: Dict[str, Any] = field(default_factory=dict)
    synth: Dict[str, Any] = field(default_factory=dict)
    noise: Optional[str] = None
    weights: Optional[str] = None

    @staticmethod
    def from_file(path: Optional[str]) -> "RunConfig":
        if path is None:
            return RunConfig()
        with open(path, "rt", encoding="utf8") as src:
            doc = json.load(src)
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        known = set(RunConfig.__dataclass_fields__)  # pylint: disable=no-member
        extra = set(doc) - known
        if extra:
            raise ValueError(f"{path}: unknown config keys {sorted(extra)}")
        return RunConfig(**doc)

    def resolve_seed(self, flag: Optional[int]) -> int:
        """Flag, then config file, then ``VOICEPD_SEED``, then 0."""
        if flag is not None:
            return flag
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(SEED_ENV, "").strip()
        if env:
            try:
                return int(env)
            except ValueError:
                raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return 0

    def model_config(self) -> ModelConfig:
        if self.model:
            return ModelConfig.from_dict(self.model)
        if self.model_scale not in MODEL_SCALES:
            raise ValueError(f"Unknown model scale {self.model_scale!r}, expect one of {sorted(MODEL_SCALES)}")
        return ModelConfig.scaled(**MODEL_SCALES[self.model_scale])

    def augmentation(self) -> AugmentationConfig:
        aug = AugmentationConfig.from_dict(self.augment) if self.augment else AugmentationConfig()
        if aug.p_background > 0 and self.noise is None and not aug.noise_corpus:
            if "p_background" in self.augment:
                raise ValueError("p_background > 0 needs a noise corpus (--noise)")
            _LOG.warning("No noise corpus given, background noise augmentation disabled")
            aug = replace(aug, p_background=0.0)
        return aug

    def train_config(self, seed: int, args: argparse.Namespace, configuration: Optional[str] = None) -> TrainConfig:
        dd = dict(self.train)
        dd["seed"] = seed
        dd["augmentation"] = self.augmentation().to_dict()
        for key, attr in (("epochs", "epochs"), ("batch_size", "batch"), ("learning_rate", "lr")):
            v = getattr(args, attr, None)
            if v is not None:
                dd[key] = v
        if getattr(args, "checkpoint_every", None) is not None:
            dd["checkpoint_every"] = args.checkpoint_every
        if getattr(args, "allow_random_conv", False):
            dd["require_pretrained"] = False
        if configuration is not None:
            dd["configuration"] = configuration
        cfg = TrainConfig.from_dict(dd)
        return replace(cfg, threads=self.threads)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "folds": self.folds,
            "model_scale": self.model_scale,
            "model": self.model,
            "train": self.train,
            "augment": self.augment,
            "synth": self.synth,
            "noise": self.noise,
            "weights": self.weights,
        }


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if args.threads is not None:
        cfg.threads = args.threads
    for attr in ("noise", "weights", "model_scale", "folds"):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, attr, v)
    return cfg


def _provenance(seed: int, *parts: Dict[str, Any]) -> Provenance:
    merged: Dict[str, Any] = {}
    for i, p in enumerate(parts):
        merged[str(i)] = p
    return Provenance(seed, config_hash(merged))


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path: Optional[str], what: str) -> Path:
    if path is None:
        raise ValueError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _conv_weights(run: RunConfig, model_cfg: ModelConfig, mode: TrainingMode) -> Optional[ConvStackParams]:
    if run.weights is None or mode is TrainingMode.FULL_SCRATCH:
        return None
    return load_weights(_require_file(run.weights, "Weight file"), model_cfg.conv)


def _noise(run: RunConfig, sample_rate: int):
    if run.noise is None:
        return None
    corpus = load_noise_corpus(_require_file(run.noise, "Noise corpus"), sample_rate)
    if not corpus:
        raise ValueError(f"No WAV files in noise corpus {run.noise}")
    return corpus


#
# Subcommands
#


def cmd_preprocess(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    seed = run.resolve_seed(args.seed)
    # headers are read per file below so that broken files end up in failures.csv
    records = load_manifest(_require_file(args.manifest, "Manifest"), read_durations=False)
    out = _out_dir(args.out)
    rate = args.rate
    prov = _provenance(seed, {"rate": rate})
    failures: List[Dict[str, str]] = []
    new_records: List[PatientRecord] = []
    for rec in records:
        samples = []
        for i, s in enumerate(rec.samples):
            dst = out / "wav" / rec.patient_id / f"{i:03d}_{s.path.stem}.wav"
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore" if args.quiet_mono else "default")
                    clip = preprocess(read_wav(s.path), rate)
                dst.parent.mkdir(parents=True, exist_ok=True)
                write_wav(clip, dst)
            except (ValueError, OSError) as e:
                _LOG.error("Failed %s: %s", s.path, e)
                failures.append({"patient_id": rec.patient_id, "file": str(s.path), "error": str(e)})
                continue
            samples.append(SampleEntry(dst.resolve(), s.utterance_type, clip.duration, s.text))
        if samples:
            new_records.append(PatientRecord(rec.patient_id, rec.group, rec.hy_grade, samples))

    write_manifest(new_records, out / "manifest.csv", prov)
    if failures:
        write_csv(pd.DataFrame(failures, columns=["patient_id", "file", "error"]), out / "failures.csv", prov)
        _LOG.error("%d files failed, see %s", len(failures), out / "failures.csv")
        return EXIT_INVALID
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    seed = run.resolve_seed(args.seed)
    model_cfg = run.model_config()
    tcfg = run.train_config(seed, args, args.configuration)
    out = _out_dir(args.out)
    prov = _provenance(seed, model_cfg.to_dict(), tcfg.to_dict())

    records = load_manifest(_require_file(args.manifest, "Manifest"))
    dataset = load_dataset(records, model_cfg.sample_rate, model_cfg.min_samples, threads=run.threads)
    conv = _conv_weights(run, model_cfg, tcfg.configuration)
    init = ModelParams.initialize(model_cfg, seed, conv=conv, frozen=not tcfg.configuration.conv_trainable)

    trace = open(out / "augment_trace.jsonl", "wt", encoding="utf8") if args.trace_augment else None
    try:
        params, log = train(
            dataset,
            init,
            tcfg,
            model_cfg,
            noise_corpus=_noise(run, model_cfg.sample_rate),
            checkpoint_dir=out,
            trace=trace,
        )
    finally:
        if trace is not None:
            trace.close()

    save_checkpoint(params, model_cfg, out / "model.vpdm", meta={"seed": seed, "config_hash": prov.config_hash})
    log.to_csv(out / "training_log.csv", prov)
    save_svg(loss_svg(log.losses, prov), out / "loss.svg")
    return EXIT_OK


def _configurations(txt: str) -> List[TrainingMode]:
    if txt.strip().lower() == "all":
        return list(TrainingMode)
    return [TrainingMode.parse(txt)]


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    seed = run.resolve_seed(args.seed)
    model_cfg = run.model_config()
    modes = _configurations(args.configuration or TrainingMode.FROZEN_CONV.value)
    tconfigs = [run.train_config(seed, args, m.value) for m in modes]
    out = _out_dir(args.out)
    prov = _provenance(seed, model_cfg.to_dict(), *(t.to_dict() for t in tconfigs), {"folds": run.folds})

    records = load_manifest(_require_file(args.manifest, "Manifest"))
    dataset = load_dataset(records, model_cfg.sample_rate, model_cfg.min_samples, threads=run.threads)
    noise = _noise(run, model_cfg.sample_rate)

    reports: List[MetricsReport] = []
    for tcfg in tconfigs:
        conv = _conv_weights(run, model_cfg, tcfg.configuration)
        kw: Dict[str, Any] = dict(k=run.folds, conv=conv, noise_corpus=noise, threads=run.threads)
        if args.trace_augment:
            with open(out / f"augment_trace-{tcfg.configuration.value}.jsonl", "wt", encoding="utf8") as trace:
                reports.append(cross_validate(dataset, tcfg, model_cfg, trace=trace, **kw))
        else:
            reports.append(cross_validate(dataset, tcfg, model_cfg, **kw))

    write_csv(pd.concat([r.to_frame() for r in reports], ignore_index=True), out / "metrics.csv", prov)
    votes = []
    for r in reports:
        vf = r.votes_frame()
        vf.insert(0, "configuration", r.configuration)
        votes.append(vf)
        save_svg(voting_svg(vf, prov), out / f"voting-{r.configuration}.svg")
    write_csv(pd.concat(votes, ignore_index=True), out / "votes.csv", prov)

    logs = []
    for r in reports:
        for fold, log in enumerate(r.logs):
            lf = log.to_frame()
            lf.insert(0, "fold", fold)
            lf.insert(0, "configuration", r.configuration)
            logs.append(lf)
    write_csv(pd.concat(logs, ignore_index=True), out / "training_log.csv", prov)

    doc = {"provenance": prov.as_dict(), "reports": [r.to_dict() for r in reports]}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf8")
    for r in reports:
        _LOG.info("%s: %s", r.configuration, r.mean())
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    params, model_cfg, meta = load_checkpoint(_require_file(args.checkpoint, "Checkpoint"))
    seed = int(meta.get("seed", 0))
    out = _out_dir(args.out)
    records = load_manifest(_require_file(args.manifest, "Manifest"))
    dataset = load_dataset(records, model_cfg.sample_rate, model_cfg.min_samples, threads=args.threads or 1)

    preds = predict_samples(dataset, params, model_cfg)
    by_patient: Dict[str, list] = {}
    for s, p in zip(dataset.samples, preds):
        by_patient.setdefault(s.patient_id, []).append(p)
    rows = []
    for pid, ps in by_patient.items():
        r = vote(ps, pid)
        rows.append(
            {
                "patient_id": pid,
                "certainty": r.certainty,
                "label": r.label.name,
                "votes_pd": r.votes_pd,
                "votes_total": r.votes_total,
            }
        )
    prov = Provenance(seed, str(meta.get("config_hash", "")))
    write_csv(pd.DataFrame(rows), out / "inference.csv", prov)
    return EXIT_OK


def cmd_viz(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.kind == "voting":
        votes = read_csv(_require_file(args.votes, "Voting CSV"))
        if votes.shape[0] == 0:
            raise ValueError(f"{args.votes} has no rows")
        save_svg(voting_svg(votes, Provenance(args.seed or 0)), out)
        return EXIT_OK

    run = _load_run_config(args)
    seed = run.resolve_seed(args.seed)
    model_cfg = run.model_config()
    clip = preprocess(read_wav(_require_file(args.wav, "WAV file")), model_cfg.sample_rate, warn_mono=False)
    if run.weights is not None:
        conv = load_weights(_require_file(run.weights, "Weight file"), model_cfg.conv)
    else:
        conv = ModelParams.initialize(model_cfg, seed).conv
    spec_cfg = SpectrogramConfig()
    spec, fmap = featuremap_comparison(clip.waveform, conv, model_cfg.conv, spec_cfg, model_cfg.sample_rate)
    spec_dur = ((spec.shape[0] - 1) * spec_cfg.hop + spec_cfg.fft_length) / model_cfg.sample_rate
    prov = _provenance(seed, model_cfg.to_dict())
    save_svg(featuremap_svg(spec, fmap, clip.duration, spec_dur, prov), out)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    seed = run.resolve_seed(args.seed)
    dd = dict(run.synth)
    dd["seed"] = seed
    for key in ("n_pd", "n_hp", "samples_per_patient", "stereo"):
        v = getattr(args, key, None)
        if v is not None:
            dd[key] = v
    if args.duration is not None:
        dd["duration_range"] = (args.duration, args.duration)
    cfg = SynthConfig.from_dict(dd)
    path = synth_generate(cfg, args.out, threads=run.threads)
    print(path)
    return EXIT_OK


def cmd_survey(args: argparse.Namespace) -> int:
    answers = load_answers(args.answers or survey_answers_path())
    truth = load_truth(args.truth or survey_truth_path())
    summaries = summarize_all(answers, truth, advanced_from=args.advanced_from)
    out = _out_dir(args.out)
    prov = _provenance(0, {"advanced_from": args.advanced_from})
    write_csv(survey_table(summaries), out / "survey_table.csv", prov)
    report = accuracy_report(summaries)
    write_csv(report, out / "survey_accuracy.csv", prov)
    for row in report.itertuples(index=False):
        print(f"binary mode accuracy ({row.tie_rule}): {row.accuracy:.4f}")
    return EXIT_OK


def cmd_augment_preview(args: argparse.Namespace) -> int:
    run = _load_run_config(args)
    seed = run.resolve_seed(args.seed)
    aug = run.augmentation()
    clip = preprocess(read_wav(_require_file(args.wav, "WAV file")), TARGET_RATE, warn_mono=False)
    noise = _noise(run, clip.sample_rate)
    after, rec = apply_pipeline(clip, aug, derive_rng(seed, 2, 0, 0), noise)

    out = _out_dir(args.out)
    prov = _provenance(seed, aug.to_dict())
    save_svg(waveform_svg(clip.waveform, after.waveform, clip.sample_rate, prov), out / "waveform.svg")
    doc = {"provenance": prov.as_dict(), "augmentations": rec.to_dict()}
    (out / "augmentations.json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf8")
    return EXIT_OK


#
# Parser
#


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"Random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--threads", type=int, default=None, help="Number of worker threads")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=parse_lr, default=None, help="Number, 'conventional' (1e-4) or 'literal' (1e-3)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--weights", default=None, help="Pretrained conv stack weight file")
    p.add_argument("--noise", default=None, help="Folder of background noise WAV files")
    p.add_argument("--model-scale", dest="model_scale", choices=sorted(MODEL_SCALES), default=None)
    p.add_argument(
        "--allow-random-conv",
        action="store_true",
        help="Let frozen/full-pretrained configurations start from a random conv stack",
    )
    p.add_argument(
        "--trace-augment",
        dest="trace_augment",
        action="store_true",
        help="Write one JSON line per augmented training sample",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voicepd", description="PD speech classification pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="Subtract channels, normalise and resample a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=TARGET_RATE)
    p.add_argument("--quiet-mono", dest="quiet_mono", action="store_true", help="Silence mono input warnings")
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="Train one configuration on a whole manifest")
    _training_flags(p)
    p.add_argument("--configuration", default=None, help="frozen | full-pretrained | full-scratch")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Stratified patient-level cross-validation")
    _training_flags(p)
    p.add_argument("--configuration", default=None, help="frozen | full-pretrained | full-scratch | all")
    p.add_argument("--folds", type=int, default=None)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="Voting inference with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", help="Render figures as SVG")
    p.add_argument("kind", choices=("voting", "featuremap"))
    p.add_argument("--votes", default=None, help="Voting CSV (kind=voting)")
    p.add_argument("--wav", default=None, help="Clip to render (kind=featuremap)")
    p.add_argument("--weights", default=None)
    p.add_argument("--model-scale", dest="model_scale", choices=sorted(MODEL_SCALES), default=None)
    p.add_argument("--out", required=True, help="Output SVG file")
    _common(p)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("synth", help="Generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pd", dest="n_pd", type=int, default=None)
    p.add_argument("--n-hp", dest="n_hp", type=int, default=None)
    p.add_argument("--samples", dest="samples_per_patient", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="Clip duration in seconds")
    p.add_argument("--stereo", action="store_const", const=True, default=None, help="44.1 kHz stereo output")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("survey", help="Score the expert questionnaire")
    p.add_argument("--answers", default=None, help="Answers CSV (default: bundled)")
    p.add_argument("--truth", default=None, help="Truth CSV (default: bundled)")
    p.add_argument("--advanced-from", dest="advanced_from", type=int, default=3)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_survey)

    p = sub.add_parser("augment-preview", help="Waveform before/after augmentation")
    p.add_argument("--wav", required=True)
    p.add_argument("--noise", default=None)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_augment_preview)

    return parser


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(args.verbose)
    if args.threads is not None and args.threads < 1:
        print("voicepd: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID

    try:
        return int(args.func(args))
    except (ValueError, FileNotFoundError) as e:
        print(f"voicepd: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # pylint: disable=broad-except
        _LOG.debug("Unhandled failure", exc_info=True)
        print(f"voicepd: failed: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
