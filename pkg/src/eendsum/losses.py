"""Training objectives: permutation-invariant diarization loss with an
additive margin, attractor existence loss, and their weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
import torch
from torch import Tensor

from .data import LabelMatrix


@dataclass
class LossBreakdown:
    diar_loss: float
    exist_loss: float
    total: float
    best_permutation: list[int]


def _as_label_tensor(labels, like: Tensor) -> Tensor:
    if isinstance(labels, LabelMatrix):
        labels = labels.values
    if isinstance(labels, Tensor):
        return labels.to(dtype=like.dtype, device=like.device)
    return torch.as_tensor(np.asarray(labels), dtype=like.dtype, device=like.device)


def pit_diar_loss(
    logits: Tensor, labels, margin: float = 0.35
) -> tuple[Tensor, tuple[int, ...]]:
    """Permutation-invariant binary cross-entropy over speakers and frames.

    For every permutation of the S speaker rows, labels are permuted, the
    additive margin is subtracted from logits at positive-label positions
    under that hypothesis, and the mean BCE over all S*T cells is taken;
    the minimum over permutations is returned along with its permutation.
    Pass ``margin=0.0`` outside training.

    Args:
        logits: (S, T) pre-sigmoid activity scores (S <= 4).
        labels: (S, T) binary matrix, LabelMatrix, or array-like. Callers
            must zero-pad labels to S rows if fewer speakers are present.
        margin: additive margin m subtracted at positive positions.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be (n_speakers, n_frames)")
    n_spk = logits.shape[0]
    if n_spk == 0:
        raise ValueError("no speakers: caller must skip empty recordings")
    if n_spk > 4:
        raise ValueError(f"PIT enumeration is capped at 4 speakers, got {n_spk}")
    y = _as_label_tensor(labels, logits)
    if y.shape != logits.shape:
        raise ValueError(f"labels shape {tuple(y.shape)} != logits shape {tuple(logits.shape)}")

    best_loss = None
    best_perm = None
    for perm in permutations(range(n_spk)):
        y_perm = y[list(perm)]
        z = logits - margin * y_perm
        loss = torch.nn.functional.binary_cross_entropy_with_logits(z, y_perm)
        if best_loss is None or loss.item() < best_loss.item():
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


def existence_loss(existence_probs: Tensor, n_speakers: int) -> Tensor:
    """Mean BCE of attractor existence probabilities against the target
    [1, ..., 1, 0]: the first S attractors exist, the stop one does not."""
    probs = existence_probs if isinstance(existence_probs, Tensor) else torch.as_tensor(existence_probs)
    if probs.ndim != 1 or probs.shape[0] != n_speakers + 1:
        raise ValueError(f"expected {n_speakers + 1} probabilities, got {tuple(probs.shape)}")
    target = torch.zeros_like(probs)
    target[:n_speakers] = 1.0
    return torch.nn.functional.binary_cross_entropy(probs, target)


def total_loss(
    diar: Tensor, exist: Tensor, alpha: float = 1.0, best_permutation: tuple[int, ...] = ()
) -> tuple[Tensor, LossBreakdown]:
    """Combine the two objectives: total = diar + alpha * exist.

    The existence term must already be detached from everything upstream
    of the attractor module (enforced where the model hands embeddings to
    it), so alpha never changes encoder gradients.
    """
    total = diar + alpha * exist
    breakdown = LossBreakdown(
        diar_loss=float(diar.detach()),
        exist_loss=float(exist.detach()),
        total=float(total.detach()),
        best_permutation=list(best_permutation),
    )
    return total, breakdown
