"""Synthetic conversation simulation, RTTM segment I/O, and conversion
between speaker segment lists and frame-level label matrices.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RttmParseError(ValueError):
    """Raised for malformed RTTM input; carries the offending line number."""


@dataclass(frozen=True)
class Segment:
    """One speaker-attributed speech interval within a recording."""

    recording_id: str
    speaker_id: str
    onset: float
    duration: float

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"segment onset must be >= 0, got {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"segment duration must be > 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class SegmentList:
    """All segments of one recording, sorted by (onset, speaker_id).

    ``total_duration`` defaults to the last segment end when not given
    (e.g. when read from RTTM, which carries no recording length).
    """

    recording_id: str
    segments: list[Segment] = field(default_factory=list)
    total_duration: float | None = None

    def __post_init__(self):
        self.segments = sorted(self.segments, key=lambda s: (s.onset, s.speaker_id))
        last_end = max((s.end for s in self.segments), default=0.0)
        if self.total_duration is None:
            self.total_duration = last_end
        elif last_end > self.total_duration + 1e-9:
            raise ValueError(
                f"segment ends at {last_end:.3f}s, beyond total_duration "
                f"{self.total_duration:.3f}s"
            )
        for seg in self.segments:
            if seg.recording_id != self.recording_id:
                raise ValueError(
                    f"segment recording_id {seg.recording_id!r} does not match "
                    f"list recording_id {self.recording_id!r}"
                )

    @property
    def speakers(self) -> list[str]:
        return sorted({s.speaker_id for s in self.segments})

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def speech_duration(self) -> float:
        """Total speech time counting overlap multiply (sum of durations
        of per-speaker merged segments)."""
        return sum(s.duration for s in self.merged().segments)

    def merged(self, gap: float = 0.0) -> "SegmentList":
        """Merge overlapping (and up-to-``gap``-separated) segments of the
        same speaker. Segments of different speakers are never merged."""
        out: list[Segment] = []
        for spk in self.speakers:
            spans = sorted(
                (s.onset, s.end) for s in self.segments if s.speaker_id == spk
            )
            cur_on, cur_end = spans[0]
            for on, end in spans[1:]:
                if on <= cur_end + gap:
                    cur_end = max(cur_end, end)
                else:
                    out.append(Segment(self.recording_id, spk, cur_on, cur_end - cur_on))
                    cur_on, cur_end = on, end
            out.append(Segment(self.recording_id, spk, cur_on, cur_end - cur_on))
        return SegmentList(self.recording_id, out, self.total_duration)


@dataclass
class LabelMatrix:
    """Frame-level speaker activity: binary (n_speakers, n_frames) matrix."""

    values: np.ndarray
    frame_shift: float
    speaker_order: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("label matrix must be 2-D (speakers x frames)")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("label matrix entries must be 0 or 1")
        if self.values.shape[0] != len(self.speaker_order):
            raise ValueError("row count must equal number of speakers")

    @property
    def n_speakers(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters for one simulated mixture.

    ``beta`` is the mean inter-utterance pause in seconds; small values
    pack each speaker's utterances densely and raise the overlap ratio.
    """

    n_speakers: int
    beta: float
    utterances_per_speaker: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        lo, hi = self.utterances_per_speaker
        if lo < 1 or hi < lo:
            raise ValueError("utterances_per_speaker must be a range with 1 <= lo <= hi")


class UtterancePool:
    """Collection of single-speaker utterances to draw mixtures from.

    Backed either by an in-memory mapping ``{speaker_id: [waveform, ...]}``
    or by a directory of mono WAV files with one subdirectory per speaker.
    """

    def __init__(self, utterances: dict[str, list[np.ndarray]], sample_rate: int):
        if not utterances:
            raise ValueError("empty utterance pool")
        self._utts = {spk: list(utts) for spk, utts in utterances.items()}
        self.sample_rate = sample_rate

    @classmethod
    def from_dir(cls, root: str | os.PathLike) -> "UtterancePool":
        """Load a pool from ``root/<speaker_id>/*.wav`` (16-bit PCM mono)."""
        from .features import read_wav

        root = Path(root)
        utts: dict[str, list[np.ndarray]] = {}
        sample_rate = None
        for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for wav in sorted(spk_dir.glob("*.wav")):
                audio, sr = read_wav(wav)
                if sample_rate is None:
                    sample_rate = sr
                elif sr != sample_rate:
                    raise ValueError(f"{wav}: sample rate {sr} != pool rate {sample_rate}")
                utts.setdefault(spk_dir.name, []).append(audio)
        if not utts:
            raise ValueError(f"no speaker subdirectories with WAV files under {root}")
        return cls(utts, sample_rate)

    @property
    def speakers(self) -> list[str]:
        return sorted(self._utts)

    def utterances(self, speaker_id: str) -> list[np.ndarray]:
        return self._utts[speaker_id]


def simulate_mixture(
    pool: UtterancePool, spec: MixtureSpec, recording_id: str = "mix"
) -> tuple[np.ndarray, SegmentList]:
    """Simulate one overlapping-speech mixture.

    Each selected speaker gets an independent timeline: an initial pause
    and inter-utterance pauses drawn from Exponential(mean=beta), with the
    speaker's utterances placed in between. Speaker tracks are summed
    sample-wise. Deterministic given ``spec`` (including its seed).

    Returns:
        (audio, truth): float waveform and the ground-truth SegmentList
        with one segment per placed utterance.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.n_speakers > len(pool.speakers):
        raise ValueError(
            f"requested {spec.n_speakers} speakers but pool has {len(pool.speakers)}"
        )
    speakers = sorted(rng.choice(pool.speakers, size=spec.n_speakers, replace=False))

    sr = pool.sample_rate
    lo, hi = spec.utterances_per_speaker
    tracks: list[np.ndarray] = []
    segments: list[Segment] = []
    for spk in speakers:
        available = pool.utterances(spk)
        n_utts = int(rng.integers(lo, hi + 1))
        if n_utts > len(available):
            raise ValueError(
                f"pool exhausted for speaker {spk!r}: requested {n_utts} "
                f"utterances, only {len(available)} available"
            )
        chosen = rng.choice(len(available), size=n_utts, replace=False)
        pieces: list[np.ndarray] = []
        cursor = 0
        for idx in chosen:
            pause = int(round(rng.exponential(spec.beta) * sr))
            utt = np.asarray(available[idx], dtype=np.float64)
            pieces.append(np.zeros(pause))
            pieces.append(utt)
            onset = (cursor + pause) / sr
            segments.append(Segment(recording_id, spk, onset, len(utt) / sr))
            cursor += pause + len(utt)
        tracks.append(np.concatenate(pieces))

    total_len = max(len(t) for t in tracks)
    audio = np.zeros(total_len)
    for track in tracks:
        audio[: len(track)] += track
    truth = SegmentList(recording_id, segments, total_duration=total_len / sr)
    return audio, truth


def read_rttm(path: str | os.PathLike) -> list[SegmentList]:
    """Parse an RTTM file into one SegmentList per recording encountered.

    Non-SPEAKER rows are skipped; malformed SPEAKER rows raise
    RttmParseError with the line number.
    """
    by_recording: dict[str, list[Segment]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if fields[0] != "SPEAKER":
                continue
            if len(fields) != 10:
                raise RttmParseError(
                    f"{path}:{lineno}: expected 10 fields, got {len(fields)}"
                )
            try:
                rec, onset, dur, spk = fields[1], float(fields[3]), float(fields[4]), fields[7]
            except ValueError as exc:
                raise RttmParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                by_recording.setdefault(rec, []).append(Segment(rec, spk, onset, dur))
            except ValueError as exc:
                raise RttmParseError(f"{path}:{lineno}: {exc}") from exc
    return [SegmentList(rec, segs) for rec, segs in by_recording.items()]


def write_rttm(lists: list[SegmentList], path: str | os.PathLike) -> None:
    """Write SegmentLists as RTTM, times rounded to 3 decimals."""
    with open(path, "w") as fh:
        for seglist in lists:
            for seg in seglist.segments:
                fh.write(
                    f"SPEAKER {seg.recording_id} 1 {seg.onset:.3f} "
                    f"{seg.duration:.3f} <NA> <NA> {seg.speaker_id} <NA> <NA>\n"
                )


def segments_to_labels(
    truth: SegmentList, frame_shift: float, n_frames: int
) -> LabelMatrix:
    """Rasterize segments to a binary (n_speakers, n_frames) matrix.

    Frame t is active for a speaker iff the frame center
    ``t * frame_shift + frame_shift / 2`` lies inside one of the speaker's
    segments. Speakers are ordered by sorted speaker_id; segments beyond
    ``n_frames`` are truncated.
    """
    if frame_shift <= 0:
        raise ValueError("frame_shift must be > 0")
    speakers = truth.speakers
    values = np.zeros((len(speakers), n_frames), dtype=np.int8)
    centers = (np.arange(n_frames) + 0.5) * frame_shift
    for seg in truth.segments:
        row = speakers.index(seg.speaker_id)
        values[row] |= (centers >= seg.onset) & (centers < seg.end)
    return LabelMatrix(values, frame_shift, speakers)


def labels_to_segments(labels: LabelMatrix, recording_id: str) -> SegmentList:
    """Run-length encode a label matrix back to segments.

    The inverse of :func:`segments_to_labels` at frame resolution: segment
    boundaries are placed at frame edges (multiples of frame_shift).
    """
    segments = []
    for row, spk in enumerate(labels.speaker_order):
        active = np.flatnonzero(labels.values[row])
        if active.size == 0:
            continue
        splits = np.flatnonzero(np.diff(active) > 1)
        for run in np.split(active, splits + 1):
            onset = run[0] * labels.frame_shift
            dur = len(run) * labels.frame_shift
            segments.append(Segment(recording_id, spk, onset, dur))
    return SegmentList(
        recording_id, segments, total_duration=labels.n_frames * labels.frame_shift
    )


def chunk_shuffle(
    features: "FeatureSequence", labels: LabelMatrix, chunk_len: int, seed: int
) -> tuple["FeatureSequence", LabelMatrix]:
    """Permute consecutive time chunks of a feature/label pair.

    The time axis is split into chunks of ``chunk_len`` frames (last chunk
    may be short) and the chunks are reordered by a seeded permutation,
    applied identically to features and labels. ``chunk_len > T`` is the
    identity transform.
    """
    from .features import FeatureSequence

    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    if features.n_frames != labels.n_frames:
        raise ValueError("features and labels must share the frame count")
    t = features.n_frames
    if chunk_len >= t:
        return features, labels
    n_chunks = -(-t // chunk_len)
    perm = chunk_permutation(n_chunks, seed)
    order = np.concatenate(
        [np.arange(c * chunk_len, min((c + 1) * chunk_len, t)) for c in perm]
    )
    shuffled = FeatureSequence(
        features.values[:, order],
        features.frame_length,
        features.frame_shift,
        features.sample_rate,
    )
    return shuffled, LabelMatrix(labels.values[:, order], labels.frame_shift, labels.speaker_order)


def chunk_permutation(n_chunks: int, seed: int) -> np.ndarray:
    """Seeded uniform permutation used by :func:`chunk_shuffle`."""
    return np.random.default_rng(seed).permutation(n_chunks)
