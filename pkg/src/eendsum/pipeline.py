"""Training loop, optimization schedule, checkpointing, and end-to-end
inference from waveform to speaker segments.

Training stages follow the standard protocol: two pre-training passes on
simulated mixtures (2-speaker, then 1-4 speaker) under a Noam schedule,
and a fine-tuning stage with a fixed learning rate and chunk shuffling.
The attractor existence loss updates only the attractor module: every
tensor entering it is detached, so encoder gradients come solely from the
diarization loss through the upsampled embeddings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import features as feat_mod
from .data import (
    LabelMatrix,
    SegmentList,
    chunk_shuffle,
    labels_to_segments,
    segments_to_labels,
)
from .encoder import ConformerEncoder, EncoderConfig
from .eda import (
    MAX_SPEAKERS,
    EncoderDecoderAttractor,
    activity_logits,
    decide,
    posteriors,
    select_active,
    shuffle_frames,
)
from .losses import existence_loss, pit_diar_loss
from .metrics import DerBreakdown, der

STAGES = ("pretrain1", "pretrain2", "finetune")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint was written."""


@dataclass
class TrainConfig:
    stage: str = "pretrain1"
    batch_size: int = 64
    input_len_frames: int = 5000
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    # optimization; scheduler "auto" resolves to noam for pre-training
    # stages and to a fixed rate for fine-tuning
    scheduler: str = "auto"
    warmup_steps: int = 100000
    learning_rate: float = 1e-5
    noam_scale: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    grad_accum: int = 1
    # objective
    alpha: float = 1.0
    margin: float = 0.35
    # data handling
    standardize: bool = True
    chunk_len_frames: int = 500
    # inference
    threshold: float = 0.5
    infer_shuffle_seed: int = 0
    # control
    checkpoint_every: int = 1000
    eval_every: int | None = None
    target_train_der: float | None = None

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.adam_betas = tuple(self.adam_betas)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.input_len_frames < 10 or self.input_len_frames % 10 != 0:
            raise ValueError("input_len_frames must be a positive multiple of 10")
        if self.effective_scheduler == "noam" and self.warmup_steps <= 0:
            raise ValueError("warmup_steps must be > 0 for the noam scheduler")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")

    @property
    def summary_mode(self) -> str:
        return self.encoder.summary_mode

    @property
    def effective_scheduler(self) -> str:
        if self.scheduler != "auto":
            return self.scheduler
        return "noam" if self.stage.startswith("pretrain") else "fixed"

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """CPU-feasible profile: tiny batches, 1000-frame inputs, and a
        short warmup so the schedule reaches a useful rate within the
        small step budget. Model width is unchanged."""
        base = dict(
            stage="pretrain1",
            batch_size=4,
            input_len_frames=1000,
            max_steps=2000,
            scheduler="noam",
            warmup_steps=500,
            checkpoint_every=2000,
            encoder=EncoderConfig(dropout=0.0),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CheckpointMeta:
    step: int
    epoch: int
    config_hash: str
    metrics: dict


@dataclass
class Recording:
    """One recording with its ground truth, the unit of train/eval data."""

    recording_id: str
    audio: np.ndarray
    sample_rate: int
    truth: SegmentList


class DiarizationModel(nn.Module):
    """Summary-aware Conformer encoder plus LSTM attractor module."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConformerEncoder(cfg)
        self.eda = EncoderDecoderAttractor(cfg.d_model)

    def decoder_conditioning(self, u_hat: Tensor) -> Tensor:
        """Vector fed to the attractor decoder at every step: the encoded
        summary (detached: no existence-loss gradient may reach the
        encoder), or literal zeros in baseline mode."""
        if self.cfg.summary_mode == "none":
            return torch.zeros_like(u_hat)
        return u_hat.detach()

    def forward(self, feats: Tensor, n_attractors: int, shuffle_seeds: list[int]):
        """feats: (B, T, n_mels) -> (attractor sets, e_up (B, T, d)).

        The attractor module sees detached, time-shuffled embeddings (the
        computational-graph cut) and the per-sample conditioning vector.
        """
        u_hat, e, e_up = self.encoder(feats)
        dec_in = self.decoder_conditioning(u_hat)
        sets = []
        for b in range(feats.shape[0]):
            e_shuf = shuffle_frames(e[b], shuffle_seeds[b]).detach()
            sets.append(self.eda(e_shuf, dec_in[b], n_attractors))
        return sets, e_up

    def batch_losses(
        self,
        feats: Tensor,
        labels: list[np.ndarray],
        shuffle_seeds: list[int],
        margin: float,
        alpha: float,
    ) -> tuple[Tensor, dict]:
        """Mean PIT diarization + existence loss over one minibatch.

        ``labels[b]`` is the (S_b, T) binary matrix for sample b; each
        sample generates S_b + 1 attractors.
        """
        u_hat, e, e_up = self.encoder(feats)
        dec_in = self.decoder_conditioning(u_hat)
        diar_terms, exist_terms = [], []
        for b, y in enumerate(labels):
            n_spk = y.shape[0]
            e_shuf = shuffle_frames(e[b], shuffle_seeds[b]).detach()
            att = self.eda(e_shuf, dec_in[b], n_spk + 1)
            logits = activity_logits(att.attractors[:n_spk], e_up[b])
            diar, _ = pit_diar_loss(logits, y, margin)
            diar_terms.append(diar)
            exist_terms.append(existence_loss(att.existence_probs, n_spk))
        diar = torch.stack(diar_terms).mean()
        exist = torch.stack(exist_terms).mean()
        total = diar + alpha * exist
        record = {
            "diar_loss": float(diar.detach()),
            "exist_loss": float(exist.detach()),
            "total": float(total.detach()),
        }
        return total, record


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def _prepared_labels(rec: Recording, feat: feat_mod.FeatureSequence) -> LabelMatrix:
    labels = segments_to_labels(rec.truth, feat.frame_shift, feat.n_frames)
    return cap_dominant_speakers(labels, MAX_SPEAKERS)


def cap_dominant_speakers(labels: LabelMatrix, max_speakers: int = MAX_SPEAKERS) -> LabelMatrix:
    """Keep the ``max_speakers`` rows with the most active frames; ties
    fall back to speaker_id order. Row order stays sorted by speaker_id."""
    if labels.n_speakers <= max_speakers:
        return labels
    counts = labels.values.sum(axis=1)
    keep = sorted(np.argsort(-counts, kind="stable")[:max_speakers])
    return LabelMatrix(
        labels.values[keep], labels.frame_shift, [labels.speaker_order[i] for i in keep]
    )


def _fix_length_pair(
    feat_vals: np.ndarray, label_vals: np.ndarray, target: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Joint random crop / right-pad so features and labels stay aligned."""
    t = feat_vals.shape[1]
    if t > target:
        off = int(rng.integers(0, t - target + 1))
        return feat_vals[:, off : off + target], label_vals[:, off : off + target]
    if t < target:
        feat_pad = np.full(
            (feat_vals.shape[0], target - t), np.log(feat_mod.ENERGY_FLOOR), dtype=feat_vals.dtype
        )
        label_pad = np.zeros((label_vals.shape[0], target - t), dtype=label_vals.dtype)
        return (
            np.concatenate([feat_vals, feat_pad], axis=1),
            np.concatenate([label_vals, label_pad], axis=1),
        )
    return feat_vals, label_vals


def _validate_stage(config: TrainConfig, recordings: list[Recording]) -> None:
    counts = {rec.recording_id: rec.truth.n_speakers for rec in recordings}
    if config.stage == "pretrain1":
        bad = {r: c for r, c in counts.items() if c != 2}
        if bad:
            raise ValueError(f"pretrain1 requires 2-speaker mixtures only; got {bad}")
    elif config.stage == "pretrain2":
        bad = {r: c for r, c in counts.items() if not 1 <= c <= 4}
        if bad:
            raise ValueError(f"pretrain2 requires 1-4 speaker mixtures; got {bad}")


def save_checkpoint(
    path: str | os.PathLike,
    model: DiarizationModel,
    config: TrainConfig,
    meta: CheckpointMeta,
    optimizer: torch.optim.Optimizer | None = None,
    rng_state: dict | None = None,
) -> None:
    payload = {
        "model_state": model.state_dict(),
        "config": config.to_dict(),
        "meta": dataclasses.asdict(meta),
        "parameter_manifest": sorted(name for name, _ in model.named_parameters()),
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if rng_state is not None:
        payload["rng_state"] = rng_state
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[DiarizationModel, TrainConfig, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    model = DiarizationModel(config.encoder)
    model.load_state_dict(payload["model_state"])
    return model, config, payload


def train(
    config: TrainConfig,
    dataset: list[Recording],
    out_dir: str | os.PathLike,
    model: DiarizationModel | None = None,
    resume: str | os.PathLike | None = None,
) -> Path:
    """Run one training stage and return the final checkpoint path.

    Deterministic given the config seed (single device): weight init,
    batch order, crop offsets, chunk shuffling, frame shuffling, and
    dropout all derive from it. ``resume`` restores model, optimizer, and
    RNG streams so an interrupted run continues identically.
    """
    if not dataset:
        raise ValueError("empty dataset")
    _validate_stage(config, dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    if model is None:
        model = DiarizationModel(config.encoder)
    model.train()

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.adam_betas,
        eps=config.adam_eps,
    )
    data_rng = np.random.default_rng(config.seed + 1)
    shuffle_rng = np.random.default_rng(config.seed + 2)

    # Features and full-length labels are extracted once per recording.
    prepared = []
    for rec in dataset:
        feat = feat_mod.log_mel(rec.audio, rec.sample_rate)
        labels = _prepared_labels(rec, feat)
        if labels.n_speakers == 0:
            raise ValueError(f"recording {rec.recording_id!r} has no speech")
        prepared.append((feat, labels))

    step = 0
    epoch = 0
    if resume is not None:
        payload = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        step = payload["meta"]["step"]
        epoch = payload["meta"]["epoch"]
        rng = payload["rng_state"]
        torch.set_rng_state(rng["torch"])
        data_rng.bit_generator.state = rng["data"]
        shuffle_rng.bit_generator.state = rng["shuffle"]

    steps_per_epoch = math.ceil(len(prepared) / config.batch_size)
    total_steps = (
        config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch
    )

    def rng_state() -> dict:
        return {
            "torch": torch.get_rng_state(),
            "data": data_rng.bit_generator.state,
            "shuffle": shuffle_rng.bit_generator.state,
        }

    def write_checkpoint(path: Path, last_record: dict) -> None:
        meta = CheckpointMeta(step, epoch, config_hash(config), last_record)
        save_checkpoint(path, model, config, meta, optimizer, rng_state())

    metrics_path = out_dir / "metrics.jsonl"
    metrics_fh = open(metrics_path, "a")
    last_record: dict = {}
    stop = False
    try:
        while step < total_steps and not stop:
            epoch += 1
            order = data_rng.permutation(len(prepared))
            for start in range(0, len(order), config.batch_size):
                if step >= total_steps or stop:
                    break
                batch_idx = order[start : start + config.batch_size]
                feats, labels = [], []
                for i in batch_idx:
                    feat, lab = prepared[i]
                    fv, lv = _fix_length_pair(
                        feat.values, lab.values, config.input_len_frames, data_rng
                    )
                    if config.stage == "finetune":
                        fseq = feat_mod.FeatureSequence(
                            fv, feat.frame_length, feat.frame_shift, feat.sample_rate
                        )
                        lmat = LabelMatrix(lv, lab.frame_shift, lab.speaker_order)
                        fseq, lmat = chunk_shuffle(
                            fseq, lmat, config.chunk_len_frames, int(data_rng.integers(2**31))
                        )
                        fv, lv = fseq.values, lmat.values
                    lv = lv[lv.any(axis=1)]  # speakers absent from the window
                    if lv.shape[0] == 0:
                        continue
                    if config.standardize:
                        fv = _standardize_values(fv)
                    feats.append(torch.from_numpy(np.ascontiguousarray(fv.T)).float())
                    labels.append(lv)
                if not feats:
                    continue
                batch = torch.stack(feats)
                seeds = [int(shuffle_rng.integers(2**31)) for _ in feats]

                total, record = model.batch_losses(
                    batch, labels, seeds, config.margin, config.alpha
                )
                (total / config.grad_accum).backward()
                step += 1
                if step % config.grad_accum == 0:
                    if config.effective_scheduler == "noam":
                        lr = noam_lr(
                            step, config.encoder.d_model, config.warmup_steps, config.noam_scale
                        )
                    else:
                        lr = config.learning_rate
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                    optimizer.step()
                    optimizer.zero_grad()
                else:
                    lr = optimizer.param_groups[0]["lr"]

                record.update(step=step, lr=lr)
                last_record = record
                metrics_fh.write(json.dumps(record) + "\n")

                if not math.isfinite(record["total"]):
                    write_checkpoint(out_dir / "checkpoint_diverged.pt", record)
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}; diagnostic checkpoint written"
                    )
                if step % config.checkpoint_every == 0:
                    write_checkpoint(out_dir / f"checkpoint_step{step}.pt", record)
                if (
                    config.eval_every
                    and config.target_train_der is not None
                    and step % config.eval_every == 0
                ):
                    report = evaluate(model, dataset, config)
                    metrics_fh.write(
                        json.dumps({"step": step, "train_der": report.overall().der}) + "\n"
                    )
                    model.train()
                    if report.overall().der <= config.target_train_der:
                        stop = True
    finally:
        metrics_fh.close()

    final = out_dir / "checkpoint_final.pt"
    write_checkpoint(final, last_record)
    return final


def _standardize_values(values: np.ndarray) -> np.ndarray:
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    return (values - mean) / np.maximum(std, 1e-8)


def infer(
    model: DiarizationModel,
    audio: np.ndarray,
    sample_rate: int,
    config: TrainConfig | None = None,
    recording_id: str = "rec",
) -> SegmentList:
    """Diarize one waveform: features, encoding, five attractor steps,
    speaker counting, per-frame decisions, and run-length encoding to a
    SegmentList with speakers spk0..spk{S-1} in attractor order."""
    config = config or TrainConfig()
    feat = feat_mod.log_mel(audio, sample_rate)
    values = _standardize_values(feat.values) if config.standardize else feat.values

    model.eval()
    with torch.no_grad():
        batch = torch.from_numpy(np.ascontiguousarray(values.T)).float().unsqueeze(0)
        sets, e_up = model(batch, MAX_SPEAKERS + 1, [config.infer_shuffle_seed])
        att = sets[0]
        s_hat = select_active(att, config.threshold)
        n_frames = e_up.shape[1]
        if s_hat == 0:
            return SegmentList(
                recording_id, [], total_duration=n_frames * feat.frame_shift
            )
        probs = posteriors(att.attractors[:s_hat], e_up[0])
        decisions = decide(probs, config.threshold)
    labels = LabelMatrix(decisions, feat.frame_shift, [f"spk{i}" for i in range(s_hat)])
    return labels_to_segments(labels, recording_id)


@dataclass
class EvaluationReport:
    per_recording: dict[str, DerBreakdown]
    ref_speaker_counts: dict[str, int]

    def group(self, counts: set[int]) -> DerBreakdown | None:
        """Time-weighted aggregate over recordings whose reference speaker
        count is in ``counts``; None when the group is empty."""
        members = [
            self.per_recording[r]
            for r, c in self.ref_speaker_counts.items()
            if c in counts
        ]
        if not members:
            return None
        return DerBreakdown(
            sum(b.missed_speech for b in members),
            sum(b.false_alarm for b in members),
            sum(b.speaker_error for b in members),
            sum(b.total_speech for b in members),
        )

    def overall(self) -> DerBreakdown:
        return self.group(set(self.ref_speaker_counts.values()))

    def format(self) -> str:
        lines = ["recording          MS(s)    FA(s)    SE(s)  total(s)    DER%"]
        for rec, b in sorted(self.per_recording.items()):
            lines.append(
                f"{rec:<16} {b.missed_speech:8.3f} {b.false_alarm:8.3f} "
                f"{b.speaker_error:8.3f} {b.total_speech:9.3f} {100 * b.der:7.2f}"
            )
        lines.append("")
        lines.append("group            DER%")
        present = sorted(set(self.ref_speaker_counts.values()))
        for n in present:
            agg = self.group({n})
            lines.append(f"NS{n:<14} {100 * agg.der:7.2f}")
        span = self.group({2, 3, 4})
        if span is not None:
            lines.append(f"{'NS2 to NS4':<15} {100 * span.der:7.2f}")
        overall = self.overall()
        lines.append(f"{'all':<15} {100 * overall.der:7.2f}")
        return "\n".join(lines)


def evaluate(
    model: DiarizationModel, dataset: list[Recording], config: TrainConfig | None = None
) -> EvaluationReport:
    """Score the model on every recording, grouped by true speaker count."""
    config = config or TrainConfig()
    per_recording: dict[str, DerBreakdown] = {}
    counts: dict[str, int] = {}
    for rec in dataset:
        hyp = infer(model, rec.audio, rec.sample_rate, config, rec.recording_id)
        per_recording[rec.recording_id] = der(rec.truth, hyp)
        counts[rec.recording_id] = rec.truth.n_speakers
    return EvaluationReport(per_recording, counts)


def load_dataset(wav_paths: list[str | os.PathLike], rttm_path: str | os.PathLike) -> list[Recording]:
    """Pair WAV files with RTTM ground truth by recording id (file stem)."""
    from .data import read_rttm

    truths = {sl.recording_id: sl for sl in read_rttm(rttm_path)}
    recordings = []
    for wav in wav_paths:
        rec_id = Path(wav).stem
        if rec_id not in truths:
            raise ValueError(f"no RTTM entry for recording {rec_id!r}")
        audio, sr = feat_mod.read_wav(wav)
        recordings.append(Recording(rec_id, audio, sr, truths[rec_id]))
    return recordings
