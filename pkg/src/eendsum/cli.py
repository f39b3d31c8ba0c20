"""Command-line entry points: simulate, train, infer, score, analyze.

Configuration comes from an optional YAML file merged over documented
defaults, with command-line flags taking final precedence. Unknown config
keys are rejected. Exit codes: 0 success, 1 runtime failure, 2 usage
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import (
    MixtureSpec,
    SegmentList,
    UtterancePool,
    read_rttm,
    segments_to_labels,
    simulate_mixture,
    write_rttm,
)
from .encoder import SUMMARY_MODES, EncoderConfig
from .features import log_mel, read_wav, write_wav
from .metrics import der, similarity_table
from .pipeline import (
    MAX_SPEAKERS,
    EvaluationReport,
    TrainConfig,
    cap_dominant_speakers,
    infer,
    load_checkpoint,
    load_dataset,
    train,
)


class ConfigError(ValueError):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _utterance_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid utterance range {text!r}")
    return lo, hi


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def build_train_config(doc: dict, toy: bool = False) -> tuple[TrainConfig, dict]:
    """Build a TrainConfig from a config document, returning it together
    with the document's ``data`` section."""
    _check_keys(doc, {"train", "encoder", "data"}, "top level")
    train_doc = dict(doc.get("train") or {})
    encoder_doc = dict(doc.get("encoder") or {})
    data_doc = dict(doc.get("data") or {})
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"encoder"}
    _check_keys(train_doc, train_fields, "train")
    _check_keys(encoder_doc, {f.name for f in dataclasses.fields(EncoderConfig)}, "encoder")
    _check_keys(data_doc, {"wav_dir", "wavs", "rttm"}, "data")

    if toy:
        config = TrainConfig.toy()
    else:
        config = TrainConfig()
    encoder = dataclasses.replace(config.encoder, **encoder_doc)
    config = dataclasses.replace(config, encoder=encoder, **train_doc)
    return config, data_doc


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return doc


def cmd_simulate(args: argparse.Namespace) -> int:
    pool = UtterancePool.from_dir(args.pool)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truths: list[SegmentList] = []
    wavs = []
    for i in range(args.n):
        spec = MixtureSpec(
            n_speakers=args.speakers,
            beta=args.beta,
            utterances_per_speaker=args.utts,
            seed=args.seed + i,
        )
        rec_id = f"mix{i:04d}"
        audio, truth = simulate_mixture(pool, spec, rec_id)
        wav_path = out / f"{rec_id}.wav"
        write_wav(wav_path, audio, pool.sample_rate)
        truths.append(truth)
        wavs.append(wav_path.name)
    write_rttm(truths, out / "truth.rttm")
    manifest = {
        "n_mixtures": args.n,
        "speakers": args.speakers,
        "beta": args.beta,
        "seed": args.seed,
        "sample_rate": pool.sample_rate,
        "wavs": wavs,
        "rttm": "truth.rttm",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(wavs)} mixtures to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    doc = load_config_file(args.config)
    config, data_doc = build_train_config(doc, toy=args.toy)

    overrides = {}
    if args.stage is not None:
        overrides["stage"] = args.stage
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if overrides:
        config = dataclasses.replace(config, **overrides)
    if args.summary_mode is not None:
        config = dataclasses.replace(
            config, encoder=dataclasses.replace(config.encoder, summary_mode=args.summary_mode)
        )

    wavs = data_doc.get("wavs")
    if args.wav_dir is not None:
        data_doc["wav_dir"] = args.wav_dir
    if args.rttm is not None:
        data_doc["rttm"] = args.rttm
    if data_doc.get("wav_dir"):
        wavs = sorted(Path(data_doc["wav_dir"]).glob("*.wav"))
    if not wavs or not data_doc.get("rttm"):
        raise ConfigError("training needs data.wav_dir (or data.wavs) and data.rttm")
    dataset = load_dataset(list(wavs), data_doc["rttm"])

    model = None
    if args.init_checkpoint:
        model, _, _ = load_checkpoint(args.init_checkpoint)
        if model.cfg.summary_mode != config.summary_mode:
            raise ConfigError(
                f"checkpoint summary_mode {model.cfg.summary_mode!r} does not match "
                f"configured {config.summary_mode!r}"
            )
    final = train(config, dataset, args.out, model=model, resume=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    model, config, _ = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        config = dataclasses.replace(config, infer_shuffle_seed=args.seed)
    hyps = []
    for wav in args.wavs:
        audio, sr = read_wav(wav)
        hyps.append(infer(model, audio, sr, config, recording_id=Path(wav).stem))
    write_rttm(hyps, args.out)
    print(f"wrote hypotheses for {len(hyps)} recordings to {args.out}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    refs = {sl.recording_id: sl for sl in read_rttm(args.ref)}
    hyps = {sl.recording_id: sl for sl in read_rttm(args.hyp)}
    if not refs:
        raise ValueError(f"no reference recordings in {args.ref}")
    extra = sorted(set(hyps) - set(refs))
    if extra:
        print(f"warning: ignoring hypothesis recordings without reference: {extra}",
              file=sys.stderr)
    per_recording = {}
    counts = {}
    for rec_id, ref in refs.items():
        hyp = hyps.get(rec_id, SegmentList(rec_id, []))
        per_recording[rec_id] = der(ref, hyp, collar=args.collar)
        counts[rec_id] = ref.n_speakers
    report = EvaluationReport(per_recording, counts)
    print(report.format())
    if args.json:
        records = {
            rec: {
                "missed_speech": b.missed_speech,
                "false_alarm": b.false_alarm,
                "speaker_error": b.speaker_error,
                "total_speech": b.total_speech,
                "der": b.der,
            }
            for rec, b in per_recording.items()
        }
        Path(args.json).write_text(json.dumps(records, indent=2) + "\n")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    import torch

    model, config, _ = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        config = dataclasses.replace(config, infer_shuffle_seed=args.seed)
    refs = [sl for sl in read_rttm(args.ref) if sl.recording_id == Path(args.wav).stem]
    if not refs:
        raise ValueError(f"no reference segments for {Path(args.wav).stem!r} in {args.ref}")
    truth = refs[0]

    audio, sr = read_wav(args.wav)
    feat = log_mel(audio, sr)
    values = feat.values
    if config.standardize:
        values = (values - values.mean(axis=1, keepdims=True)) / np.maximum(
            values.std(axis=1, keepdims=True), 1e-8
        )
    model.eval()
    with torch.no_grad():
        batch = torch.from_numpy(np.ascontiguousarray(values.T)).float().unsqueeze(0)
        sets, e_up = model(batch, MAX_SPEAKERS + 1, [config.infer_shuffle_seed])
    labels = segments_to_labels(truth, feat.frame_shift, e_up.shape[1])
    labels = cap_dominant_speakers(labels)
    n_spk = labels.n_speakers
    table = similarity_table(e_up[0], sets[0].attractors[:n_spk], labels)
    print(table.format())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eendsum",
        description="Speaker diarization with attractor calculation and "
        "conversational summary vectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate overlapping-speech mixtures")
    p.add_argument("--pool", required=True, help="directory of per-speaker WAV subdirectories")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=10, help="number of mixtures")
    p.add_argument("--speakers", type=_positive_int, default=2)
    p.add_argument("--beta", type=_positive_float, default=2.0, help="mean pause length (s)")
    p.add_argument("--utts", type=_utterance_range, default=(1, 3), metavar="LO:HI")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--stage", choices=["pretrain1", "pretrain2", "finetune"])
    p.add_argument("--summary-mode", choices=list(SUMMARY_MODES))
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=_positive_int)
    p.add_argument("--wav-dir")
    p.add_argument("--rttm")
    p.add_argument("--toy", action="store_true", help="start from the toy profile defaults")
    p.add_argument("--init-checkpoint", help="initialize weights from a checkpoint")
    p.add_argument("--resume", help="resume an interrupted run (model+optimizer+RNG)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="diarize WAV files to RTTM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output RTTM path")
    p.add_argument("--seed", type=int, help="frame-shuffle seed used at inference")
    p.add_argument("wavs", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="score hypothesis RTTM against reference RTTM")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--json", help="also write per-recording results as JSON")
    p.add_argument("--seed", type=int, help="accepted for interface uniformity; scoring is deterministic")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("analyze", help="embedding-attractor similarity table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--ref", required=True, help="reference RTTM")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 1; argparse handles usage (2)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
