"""Diarization error rate scoring with optimal speaker mapping, and the
embedding-attractor dot-product similarity diagnostic.

Scoring uses exact interval arithmetic: the time axis is partitioned at
every segment boundary, speaker activity is constant inside each region,
and error times are accumulated per region. Overlapping speech is fully
counted (the reference denominator counts each active speaker).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import LabelMatrix, SegmentList

# Exact enumeration below this size honors the lowest-index tie-break;
# larger problems fall back to the Hungarian solver.
_ENUMERATION_LIMIT = 6


@dataclass
class DerBreakdown:
    missed_speech: float
    false_alarm: float
    speaker_error: float
    total_speech: float

    @property
    def der(self) -> float:
        return (self.missed_speech + self.false_alarm + self.speaker_error) / self.total_speech


@dataclass
class SimilarityTable:
    """Mean attractor-embedding dot products split by ground-truth frame
    class: one row per reference speaker, then overlap, then silence."""

    values: np.ndarray  # (S+2, S); NaN rows mark empty classes
    row_labels: list[str]

    def format(self) -> str:
        n_att = self.values.shape[1]
        width = max(len(label) for label in self.row_labels) + 2
        header = " " * width + "".join(f"att{c + 1}".rjust(9) for c in range(n_att))
        lines = [header]
        for label, row in zip(self.row_labels, self.values):
            cells = "".join(
                ("n/a".rjust(9) if np.isnan(v) else f"{v:9.3f}") for v in row
            )
            lines.append(label.ljust(width) + cells)
        return "\n".join(lines)


def optimal_speaker_map(overlap_matrix: np.ndarray) -> dict[int, int]:
    """Injective partial map ref->hyp maximizing total mapped overlap.

    Zero-overlap pairings are dropped from the result. For small problems
    every full-size injective map is enumerated and ties are broken by the
    lexicographically smallest pair list; larger problems use the exact
    Hungarian assignment.
    """
    m = np.asarray(overlap_matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("overlap matrix must be 2-D")
    if m.size == 0:
        return {}
    if (m < 0).any():
        raise ValueError("overlap matrix entries must be nonnegative")
    n_ref, n_hyp = m.shape

    if max(n_ref, n_hyp) <= _ENUMERATION_LIMIT:
        best_pairs, best_value = None, -1.0
        if n_ref <= n_hyp:
            candidates = (
                tuple(zip(range(n_ref), cols))
                for cols in permutations(range(n_hyp), n_ref)
            )
        else:
            candidates = (
                tuple(zip(rows, range(n_hyp)))
                for rows in permutations(range(n_ref), n_hyp)
            )
        for pairs in candidates:
            value = sum(m[r, h] for r, h in pairs)
            key = tuple(sorted(pairs))
            if (
                best_pairs is None
                or value > best_value + 1e-12
                or (abs(value - best_value) <= 1e-12 and key < best_pairs)
            ):
                best_pairs, best_value = key, value
        chosen = best_pairs
    else:
        rows, cols = linear_sum_assignment(-m)
        chosen = tuple(zip(rows.tolist(), cols.tolist()))

    return {r: h for r, h in chosen if m[r, h] > 0}


def _speaker_intervals(seglist: SegmentList) -> dict[str, list[tuple[float, float]]]:
    if not seglist.segments:
        return {}
    merged = seglist.merged()
    spans: dict[str, list[tuple[float, float]]] = {}
    for seg in merged.segments:
        spans.setdefault(seg.speaker_id, []).append((seg.onset, seg.end))
    return spans


def _merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for on, end in sorted(intervals):
        if out and on <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], end))
        else:
            out.append((on, end))
    return out


def speaker_overlap_matrix(
    ref: SegmentList, hyp: SegmentList
) -> tuple[np.ndarray, list[str], list[str]]:
    """Pairwise ref-speaker x hyp-speaker overlapped speech time."""
    ref_spans = _speaker_intervals(ref)
    hyp_spans = _speaker_intervals(hyp)
    ref_speakers = sorted(ref_spans)
    hyp_speakers = sorted(hyp_spans)
    m = np.zeros((len(ref_speakers), len(hyp_speakers)))
    for i, r in enumerate(ref_speakers):
        for j, h in enumerate(hyp_speakers):
            m[i, j] = sum(
                max(0.0, min(re, he) - max(ro, ho))
                for ro, re in ref_spans[r]
                for ho, he in hyp_spans[h]
            )
    return m, ref_speakers, hyp_speakers


def der(ref: SegmentList, hyp: SegmentList, collar: float = 0.0) -> DerBreakdown:
    """Score a hypothesis against a reference for one recording.

    Speaker error uses the one-to-one ref-hyp speaker mapping that
    maximizes globally matched overlap time. A collar > 0 excludes
    +/-collar around every reference segment boundary from scoring
    (errors and denominator alike). Raises if the reference contains no
    scored speech.
    """
    if ref.recording_id != hyp.recording_id:
        raise ValueError(
            f"recording_id mismatch: ref {ref.recording_id!r} vs hyp {hyp.recording_id!r}"
        )
    if collar < 0:
        raise ValueError("collar must be >= 0")

    ref_spans = _speaker_intervals(ref)
    hyp_spans = _speaker_intervals(hyp)
    overlap, ref_speakers, hyp_speakers = speaker_overlap_matrix(ref, hyp)
    index_map = optimal_speaker_map(overlap) if overlap.size else {}
    mapped = {ref_speakers[r]: hyp_speakers[h] for r, h in index_map.items()}

    excluded: list[tuple[float, float]] = []
    if collar > 0:
        for spans in ref_spans.values():
            for on, end in spans:
                excluded.append((max(0.0, on - collar), on + collar))
                excluded.append((max(0.0, end - collar), end + collar))
        excluded = _merge_intervals(excluded)

    boundaries = {0.0}
    for spans in list(ref_spans.values()) + list(hyp_spans.values()):
        for on, end in spans:
            boundaries.update((on, end))
    for on, end in excluded:
        boundaries.update((on, end))
    edges = sorted(boundaries)

    def active(spans: list[tuple[float, float]], t: float) -> bool:
        return any(on <= t < end for on, end in spans)

    missed = fa = spkerr = total = 0.0
    for left, right in zip(edges, edges[1:]):
        dur = right - left
        if dur <= 0:
            continue
        mid = (left + right) / 2
        if any(on <= mid < end for on, end in excluded):
            continue
        active_ref = [r for r in ref_speakers if active(ref_spans[r], mid)]
        active_hyp = {h for h in hyp_speakers if active(hyp_spans[h], mid)}
        n_ref, n_hyp = len(active_ref), len(active_hyp)
        total += dur * n_ref
        missed += dur * max(0, n_ref - n_hyp)
        fa += dur * max(0, n_hyp - n_ref)
        n_correct = sum(1 for r in active_ref if mapped.get(r) in active_hyp)
        spkerr += dur * (min(n_ref, n_hyp) - n_correct)
    if total <= 0:
        raise ValueError(f"empty reference speech for recording {ref.recording_id!r}")
    return DerBreakdown(missed, fa, spkerr, total)


def similarity_table(e_up, attractors, labels: LabelMatrix) -> SimilarityTable:
    """Mean dot product of each attractor with frames of each label class.

    Frames are classified from the ground-truth label matrix as
    single-speaker (exactly one active), overlap (two or more), or silence.
    Attractor columns are first permuted into reference-speaker order via
    the optimal mapping between frame decisions and label rows, so entry
    [r][r] pairs speaker r with the attractor that tracks them. Classes
    with no frames yield NaN rows.
    """
    from .eda import decide, posteriors

    e = np.asarray(e_up.detach().cpu().numpy() if hasattr(e_up, "detach") else e_up, dtype=np.float64)
    a = np.asarray(
        attractors.detach().cpu().numpy() if hasattr(attractors, "detach") else attractors,
        dtype=np.float64,
    )
    n_spk = labels.n_speakers
    if a.shape[0] != n_spk:
        raise ValueError(
            f"expected {n_spk} attractors to match label rows, got {a.shape[0]}"
        )
    if labels.n_frames != e.shape[0]:
        raise ValueError("labels and embeddings must share the frame count")

    import torch

    decisions = decide(posteriors(torch.as_tensor(a), torch.as_tensor(e)))
    counts_both = decisions.astype(np.float64) @ labels.values.T.astype(np.float64)  # (att, ref)
    index_map = optimal_speaker_map(counts_both.T)  # ref -> attractor
    order = [-1] * n_spk
    for r, c in index_map.items():
        order[r] = c
    unused = [c for c in range(n_spk) if c not in index_map.values()]
    for r in range(n_spk):
        if order[r] == -1:
            order[r] = unused.pop(0)

    dots = a[order] @ e.T  # (S, T), column c tracks reference speaker c
    n_active = labels.values.sum(axis=0)
    values = np.full((n_spk + 2, n_spk), np.nan)
    for r in range(n_spk):
        frames = (labels.values[r] == 1) & (n_active == 1)
        if frames.any():
            values[r] = dots[:, frames].mean(axis=1)
    if (n_active >= 2).any():
        values[n_spk] = dots[:, n_active >= 2].mean(axis=1)
    if (n_active == 0).any():
        values[n_spk + 1] = dots[:, n_active == 0].mean(axis=1)

    row_labels = [f"speaker {s}" for s in labels.speaker_order] + ["overlap", "silence"]
    return SimilarityTable(values, row_labels)
