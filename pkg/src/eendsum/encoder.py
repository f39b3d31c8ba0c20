"""Summary-aware Conformer encoder with 10-fold convolutional subsampling
and mirrored transposed-convolution upsampling.

The encoder threads a summary vector through every block as a synthetic
frame 0. Inside a block the summary participates in both Macaron
feed-forward halves and in self-attention, but skips the convolution
module so it keeps a global (position-free) view of the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

SUMMARY_MODES = ("none", "avg_pool", "max_pool", "learned")


@dataclass
class EncoderConfig:
    n_blocks: int = 4
    n_heads: int = 4
    d_model: int = 256
    ffn_hidden: int = 1024
    summary_mode: str = "none"
    dropout: float = 0.1
    n_mels: int = 23
    depthwise_kernel: int = 31

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.summary_mode not in SUMMARY_MODES:
            raise ValueError(
                f"unknown summary_mode {self.summary_mode!r}; expected one of {SUMMARY_MODES}"
            )


def subsampled_length(t: int) -> int:
    """Output frame count of ConvSubsample: floor((ceil(T/2) - 5)/5) + 1."""
    if t < 10:
        raise ValueError(f"input of {t} frames is too short to subsample (need >= 10)")
    t1 = (t + 1) // 2  # kernel 3, stride 2, padding 1
    return (t1 - 5) // 5 + 1  # kernel 5, stride 5, padding 0


def upsampled_length(t_sub: int) -> int:
    """Output frame count of ConvUpsample: exactly 10 * T'."""
    if t_sub < 1:
        raise ValueError("subsampled length must be >= 1")
    t1 = (t_sub - 1) * 5 + 5  # transposed: kernel 5, stride 5
    return (t1 - 1) * 2 - 2 + 3 + 1  # transposed: kernel 3, stride 2, pad 1, out-pad 1


class ConvSubsample(nn.Module):
    """10-fold temporal subsampling: conv(k3,s2,p1) + conv(k5,s5,p0)."""

    def __init__(self, n_mels: int, d_model: int):
        super().__init__()
        self.conv1 = nn.Conv1d(n_mels, d_model, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(d_model, d_model, kernel_size=5, stride=5)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, T, n_mels) -> (B, T', d_model)
        subsampled_length(x.shape[1])  # raises on sequences too short to subsample
        h = torch.relu(self.conv1(x.transpose(1, 2)))
        h = torch.relu(self.conv2(h))
        return h.transpose(1, 2)


class ConvUpsample(nn.Module):
    """Mirror of ConvSubsample: two transposed convolutions with batch
    normalization and ReLU, restoring exactly 10 * T' frames."""

    def __init__(self, d_model: int):
        super().__init__()
        self.conv1 = nn.ConvTranspose1d(d_model, d_model, kernel_size=5, stride=5)
        self.bn1 = nn.BatchNorm1d(d_model)
        self.conv2 = nn.ConvTranspose1d(
            d_model, d_model, kernel_size=3, stride=2, padding=1, output_padding=1
        )
        self.bn2 = nn.BatchNorm1d(d_model)

    def forward(self, e: Tensor) -> Tensor:
        # e: (B, T', d_model) -> (B, 10*T', d_model)
        h = torch.relu(self.bn1(self.conv1(e.transpose(1, 2))))
        h = torch.relu(self.bn2(self.conv2(h)))
        return h.transpose(1, 2)


class FeedForwardModule(nn.Module):
    def __init__(self, d_model: int, hidden: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, hidden)
        self.linear2 = nn.Linear(hidden, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.dropout(torch.nn.functional.silu(self.linear1(self.norm(x))))
        return self.dropout(self.linear2(h))


class SelfAttentionModule(nn.Module):
    """Full self-attention over all frames; no positional embeddings."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        out, _ = self.attn(h, h, h, need_weights=False)
        return self.dropout(out)


class ConvolutionModule(nn.Module):
    """Standard Conformer convolution module: pointwise conv + GLU,
    depthwise conv, batch norm, SiLU, pointwise conv."""

    def __init__(self, d_model: int, kernel_size: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise1 = nn.Conv1d(d_model, 2 * d_model, kernel_size=1)
        self.depthwise = nn.Conv1d(
            d_model, d_model, kernel_size, padding=kernel_size // 2, groups=d_model
        )
        self.bn = nn.BatchNorm1d(d_model)
        self.pointwise2 = nn.Conv1d(d_model, d_model, kernel_size=1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x).transpose(1, 2)  # (B, d, T)
        h = torch.nn.functional.glu(self.pointwise1(h), dim=1)
        h = torch.nn.functional.silu(self.bn(self.depthwise(h)))
        return self.dropout(self.pointwise2(h)).transpose(1, 2)


class SummaryConformerBlock(nn.Module):
    """Conformer block operating on a summary vector plus frame sequence.

    With z = u concatenated at frame 0:
        z  <- z + 1/2 FFN(z)
        z  <- z + MHSA(z)
        frames <- frames + Conv(frames)      (summary row bypasses Conv)
        u', E  <- LayerNorm(z + 1/2 FFN(z))
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ffn1 = FeedForwardModule(cfg.d_model, cfg.ffn_hidden, cfg.dropout)
        self.mhsa = SelfAttentionModule(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.conv = ConvolutionModule(cfg.d_model, cfg.depthwise_kernel, cfg.dropout)
        self.ffn2 = FeedForwardModule(cfg.d_model, cfg.ffn_hidden, cfg.dropout)
        self.norm_out = nn.LayerNorm(cfg.d_model)

    def forward(self, u: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        # u: (B, d), x: (B, T', d)
        z = torch.cat([u.unsqueeze(1), x], dim=1)
        z = z + 0.5 * self.ffn1(z)
        z = z + self.mhsa(z)
        frames = z[:, 1:] + self.conv(z[:, 1:])
        z = torch.cat([z[:, :1], frames], dim=1)
        z = self.norm_out(z + 0.5 * self.ffn2(z))
        return z[:, 0], z[:, 1:]


class ConformerEncoder(nn.Module):
    """Full encoder: subsample, initialize the summary, run the block
    stack, and upsample the frame embeddings back to input resolution."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsample = ConvSubsample(cfg.n_mels, cfg.d_model)
        self.blocks = nn.ModuleList(SummaryConformerBlock(cfg) for _ in range(cfg.n_blocks))
        self.upsample = ConvUpsample(cfg.d_model)
        if cfg.summary_mode == "learned":
            self.summary_param = nn.Parameter(
                torch.randn(cfg.d_model) * cfg.d_model**-0.5
            )

    def init_summary(self, h: Tensor, mode: str | None = None) -> Tensor:
        """Initial summary vector from subsampled frames h: (B, T', d).

        avg_pool/max_pool reduce over time; learned returns the trainable
        parameter (independent of h); none returns zeros.
        """
        mode = self.cfg.summary_mode if mode is None else mode
        if mode == "none":
            return torch.zeros(h.shape[0], h.shape[2], dtype=h.dtype, device=h.device)
        if mode == "avg_pool":
            return h.mean(dim=1)
        if mode == "max_pool":
            return h.max(dim=1).values
        if mode == "learned":
            return self.summary_param.unsqueeze(0).expand(h.shape[0], -1)
        raise ValueError(f"unknown summary_mode {mode!r}")

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """feats: (B, T, n_mels) -> (u_hat (B, d), e (B, T', d), e_up (B, 10*T', d))."""
        h = self.subsample(feats)
        u = self.init_summary(h)
        for block in self.blocks:
            u, h = block(u, h)
        return u, h, self.upsample(h)
