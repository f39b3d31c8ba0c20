"""LSTM encoder-decoder attractor calculation.

Shuffled frame embeddings drive an LSTM encoder whose final state
initializes an LSTM decoder; the decoder emits one attractor per step,
fed the same conditioning vector (a learned conversational summary, or a
zero vector in the baseline) at every step. A linear head estimates the
probability that each attractor corresponds to a real speaker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

MAX_SPEAKERS = 4


@dataclass
class AttractorSet:
    """Attractors as rows of an (n, d) tensor plus existence probabilities."""

    attractors: Tensor
    existence_probs: Tensor

    def __post_init__(self):
        if self.attractors.shape[0] != self.existence_probs.shape[0]:
            raise ValueError("one existence probability per attractor required")

    @property
    def n_attractors(self) -> int:
        return self.attractors.shape[0]


def shuffle_frames(e: Tensor, seed: int) -> Tensor:
    """Permute the time axis of e (T', d) by a seeded uniform permutation.

    Applied to the attractor module's input in training and inference
    alike; the permutation is reproducible from the seed.
    """
    perm = np.random.default_rng(seed).permutation(e.shape[0])
    return e[torch.from_numpy(perm)]


class EncoderDecoderAttractor(nn.Module):
    """Single-layer unidirectional LSTM encoder/decoder pair."""

    def __init__(self, d_model: int = 256):
        super().__init__()
        self.d_model = d_model
        self.encoder = nn.LSTM(d_model, d_model, num_layers=1, batch_first=True)
        self.decoder = nn.LSTM(d_model, d_model, num_layers=1, batch_first=True)
        self.existence_head = nn.Linear(d_model, 1)

    def forward(
        self, e_shuf: Tensor, decoder_input: Tensor, n_attractors: int
    ) -> AttractorSet:
        """Generate attractors from shuffled embeddings e_shuf (T', d).

        The decoder starts from the encoder's final hidden/cell state and
        receives ``decoder_input`` (d,) at every one of its
        ``n_attractors`` steps; attractor s is the decoder hidden state
        after step s.
        """
        if n_attractors < 1:
            raise ValueError("n_attractors must be >= 1")
        _, (h_enc, c_enc) = self.encoder(e_shuf.unsqueeze(0))
        steps = decoder_input.unsqueeze(0).unsqueeze(0).expand(1, n_attractors, -1)
        hidden, _ = self.decoder(steps, (h_enc, c_enc))
        attractors = hidden.squeeze(0)  # (n_attractors, d)
        probs = torch.sigmoid(self.existence_head(attractors)).squeeze(-1)
        return AttractorSet(attractors, probs)


def select_active(att: AttractorSet, tau: float = 0.5) -> int:
    """Estimated speaker count: attractors before the first existence
    probability below ``tau``, capped at MAX_SPEAKERS. The stop attractor
    and everything after it are discarded."""
    probs = att.existence_probs.detach()
    if probs.numel() == 0:
        raise ValueError("empty existence probabilities")
    below = (probs < tau).nonzero()
    s_hat = int(below[0]) if below.numel() else probs.numel()
    return min(s_hat, MAX_SPEAKERS)


def activity_logits(attractors: Tensor, e_up: Tensor) -> Tensor:
    """Pre-sigmoid speaker activity scores: (S, T) matrix of inner
    products between attractors (S, d) and upsampled embeddings (T, d)."""
    return attractors @ e_up.T


def posteriors(attractors: Tensor, e_up: Tensor) -> Tensor:
    """Per-frame speaker activity probabilities P[s, t] = sigmoid(a_s . e_t)."""
    return torch.sigmoid(activity_logits(attractors, e_up))


def decide(p: Tensor, threshold: float = 0.5, median_kernel: int | None = None) -> np.ndarray:
    """Binarize posteriors with a strict threshold (P == threshold -> 0).

    ``median_kernel`` optionally applies per-speaker median smoothing with
    an odd window length before thresholding.
    """
    probs = p.detach().cpu().numpy() if isinstance(p, Tensor) else np.asarray(p)
    if median_kernel is not None:
        from scipy.ndimage import median_filter

        if median_kernel % 2 == 0:
            raise ValueError("median_kernel must be odd")
        probs = median_filter(probs, size=(1, median_kernel), mode="nearest")
    return (probs > threshold).astype(np.int8)
