"""Sequence model mapping acoustic embeddings to articulator trajectories.

The trunk stacks periodicity-aware blocks (depthwise convolutions wrapped in
snake activations at fixed frequency factors) in front of standard
attention/convolution blocks, followed by a per-frame linear head. During
training a span mask hides part of the input embedding, wav2vec-2 style.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch, SpanTooLong

BLOCK_KINDS = ("pnp", "conformer", "transformer", "conv")


@dataclass
class InverterConfig:
    model_dim: int = 256
    n_pnp_blocks: int = 4
    n_conformer_blocks: int = 4
    attention_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: int = 5
    conv_stride: int = 1
    snake_factors: tuple[float, ...] = (5.0, 7.0, 11.0, 13.0)
    mask_fraction: float = 0.15
    mask_span_frames: int = 10
    out_channels: int = 18
    dropout: float = 0.0
    # "chain" runs the four snake/conv stages sequentially inside one
    # residual; "parallel_sum" sums four independent branches instead.
    pnp_topology: str = "chain"
    trunk: str = "blocks"  # or "mlp" (per-frame multilayer perceptron)
    block_layout: tuple[str, ...] | None = None
    mlp_hidden_dim: int = 1536
    mlp_hidden_layers: int = 5

    def __post_init__(self):
        if len(self.snake_factors) != 4 or any(a <= 0 for a in self.snake_factors):
            raise ValueError("snake_factors must be four positive values")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must lie strictly between 0 and 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.conv_stride != 1:
            raise ValueError("only stride 1 preserves sequence length")
        if self.model_dim % self.attention_heads != 0:
            raise ValueError("model_dim must be divisible by attention_heads")
        if self.pnp_topology not in ("chain", "parallel_sum"):
            raise ValueError(f"unknown pnp_topology {self.pnp_topology!r}")
        if self.trunk not in ("blocks", "mlp"):
            raise ValueError(f"unknown trunk {self.trunk!r}")
        if self.block_layout is not None:
            self.block_layout = tuple(self.block_layout)
            for kind in self.block_layout:
                if kind not in BLOCK_KINDS:
                    raise ValueError(f"unknown block kind {kind!r}")
        if isinstance(self.snake_factors, list):
            self.snake_factors = tuple(self.snake_factors)

    def resolved_layout(self) -> tuple[str, ...]:
        if self.block_layout is not None:
            return self.block_layout
        return ("pnp",) * self.n_pnp_blocks + ("conformer",) * self.n_conformer_blocks


def snake(x: torch.Tensor, a: float) -> torch.Tensor:
    """x + sin^2(a x) / a, the periodicity-biased activation."""
    return x + torch.sin(a * x) ** 2 / a


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Span masking
# ---------------------------------------------------------------------------

@dataclass
class MaskPlan:
    """Which frame indices one masking draw covered."""

    masked_indices: np.ndarray
    span: int
    target_fraction: float


def sample_mask_indices(n_frames: int, fraction: float, span: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Sample span starts without replacement until coverage targets ``fraction``.

    Spans may overlap, so realized coverage trails n_spans * span / T a bit.
    """
    if fraction <= 0.0:
        return np.empty(0, dtype=np.int64)
    if span > n_frames:
        raise SpanTooLong(f"span {span} exceeds sequence length {n_frames}")
    exact = fraction * n_frames / span
    n_spans = int(exact) + int(rng.random() < exact - int(exact))
    n_positions = n_frames - span + 1
    n_spans = min(n_spans, n_positions)
    if n_spans == 0:
        return np.empty(0, dtype=np.int64)
    starts = rng.choice(n_positions, size=n_spans, replace=False)
    covered = (starts[:, None] + np.arange(span)[None, :]).ravel()
    return np.unique(covered).astype(np.int64)


def apply_time_mask(x: torch.Tensor, mask_token: torch.Tensor, fraction: float,
                    span: int, seed: int) -> tuple[torch.Tensor, MaskPlan]:
    """Replace randomly chosen spans of a ``[T, D]`` sequence by the mask token."""
    if x.dim() != 2:
        raise ShapeMismatch(f"expected [T, D], got {tuple(x.shape)}")
    rng = np.random.default_rng(seed)
    idx = sample_mask_indices(x.shape[0], fraction, span, rng)
    plan = MaskPlan(masked_indices=idx, span=span, target_fraction=fraction)
    if idx.size == 0:
        return x, plan
    out = x.clone()
    out[torch.from_numpy(idx)] = mask_token.to(dtype=x.dtype)
    return out, plan


class TimeMasker(nn.Module):
    """Owns the learned mask token and applies span masking to batches."""

    def __init__(self, dim: int):
        super().__init__()
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(self, x: torch.Tensor, fraction: float, span: int,
                seed: int | None = None) -> torch.Tensor:
        if seed is None:
            seed = int(torch.randint(0, 2 ** 31 - 1, (1,)).item())
        rows = []
        for b in range(x.shape[0]):
            masked, _ = apply_time_mask(x[b], self.mask_token, fraction, span,
                                        seed=_mix_seed(seed, b))
            rows.append(masked)
        return torch.stack(rows, dim=0)


def _mix_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

class DepthwisePnpConv(nn.Module):
    """Four snake -> depthwise-conv stages under one residual connection.

    The snake frequency factors are applied in sequential order; every
    convolution is per-channel with same padding.
    """

    def __init__(self, channels: int, kernel_size: int = 5,
                 snake_factors: tuple[float, ...] = (5.0, 7.0, 11.0, 13.0),
                 topology: str = "chain"):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.snake_factors = tuple(float(a) for a in snake_factors)
        self.topology = topology
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2,
                      groups=channels)
            for _ in self.snake_factors
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, C, T) or (C, T); output has the same shape."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[1] != self.convs[0].in_channels:
            raise ShapeMismatch(
                f"expected (B, {self.convs[0].in_channels}, T), got {tuple(x.shape)}"
            )
        if self.topology == "chain":
            y = x
            for a, conv in zip(self.snake_factors, self.convs):
                y = conv(snake(y, a))
        else:
            y = sum(conv(snake(x, a)) for a, conv in zip(self.snake_factors, self.convs))
        out = x + y
        return out.squeeze(0) if squeeze else out


class FeedForwardModule(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.w1 = nn.Linear(dim, expansion * dim)
        self.w2 = nn.Linear(expansion * dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        y = self.w1(self.norm(x))
        y = self.dropout(F.silu(y))
        return self.dropout(self.w2(y))


def _rel_pos_table(n_frames: int, dim: int, device, dtype) -> torch.Tensor:
    """Sinusoidal embeddings for relative offsets T-1 .. -(T-1)."""
    offsets = torch.arange(n_frames - 1, -n_frames, -1, device=device, dtype=dtype)
    inv_freq = torch.exp(
        torch.arange(0, dim, 2, device=device, dtype=dtype) * (-math.log(10000.0) / dim)
    )
    angles = offsets[:, None] * inv_freq[None, :]
    table = torch.zeros(offsets.shape[0], dim, device=device, dtype=dtype)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles)
    return table


class RelPosSelfAttention(nn.Module):
    """Self-attention with learned content/position biases on relative offsets."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.pos_proj = nn.Linear(dim, dim, bias=False)
        self.content_bias = nn.Parameter(torch.zeros(n_heads, self.head_dim))
        self.pos_bias = nn.Parameter(torch.zeros(n_heads, self.head_dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        H, dh = self.n_heads, self.head_dim
        q = self.q_proj(x).view(B, T, H, dh).transpose(1, 2)
        k = self.k_proj(x).view(B, T, H, dh).transpose(1, 2)
        v = self.v_proj(x).view(B, T, H, dh).transpose(1, 2)

        pos = _rel_pos_table(T, D, x.device, x.dtype)
        p = self.pos_proj(pos).view(2 * T - 1, H, dh)

        content = torch.einsum("bhid,bhjd->bhij", q + self.content_bias[None, :, None], k)
        rel_full = torch.einsum("bhid,jhd->bhij", q + self.pos_bias[None, :, None], p)
        # rel_full's last axis runs over offsets T-1 .. -(T-1); pick entry
        # T-1-(i-j) for each (i, j).
        gather_idx = (
            torch.arange(T, device=x.device)[None, :]
            - torch.arange(T, device=x.device)[:, None]
            + (T - 1)
        )
        rel = rel_full.gather(
            3, gather_idx.expand(B, H, T, T)
        )
        attn = torch.softmax((content + rel) / math.sqrt(dh), dim=-1)
        attn = self.dropout(attn)
        out = torch.einsum("bhij,bhjd->bhid", attn, v)
        out = out.transpose(1, 2).reshape(B, T, D)
        return self.out_proj(out)


class ConvolutionModule(nn.Module):
    """Pointwise/GLU, depthwise, pointwise sandwich with frame-wise norm."""

    def __init__(self, dim: int, depthwise: nn.Module, dropout: float):
        super().__init__()
        self.norm_in = nn.LayerNorm(dim)
        self.pw_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = depthwise
        self.norm_mid = nn.LayerNorm(dim)
        self.pw_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        y = self.norm_in(x).transpose(1, 2)          # (B, D, T)
        y = F.glu(self.pw_in(y), dim=1)
        y = self.depthwise(y)
        y = F.silu(self.norm_mid(y.transpose(1, 2))).transpose(1, 2)
        y = self.pw_out(y).transpose(1, 2)
        return self.dropout(y)


class ConformerBlock(nn.Module):
    """One macaron block; ``kind`` selects which sublayers exist.

    kind="pnp"         half-FFN, rel-pos attention, periodicity conv module, half-FFN
    kind="conformer"   same but with a plain depthwise convolution
    kind="transformer" attention only (no convolution module)
    kind="conv"        attention replaced by a full convolution sublayer
    """

    def __init__(self, dim: int, n_heads: int = 4, ffn_expansion: int = 4,
                 kernel_size: int = 5, dropout: float = 0.0, kind: str = "conformer",
                 snake_factors: tuple[float, ...] = (5.0, 7.0, 11.0, 13.0),
                 pnp_topology: str = "chain"):
        super().__init__()
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}")
        self.kind = kind
        self.ffn1 = FeedForwardModule(dim, ffn_expansion, dropout)
        self.ffn2 = FeedForwardModule(dim, ffn_expansion, dropout)
        if kind == "conv":
            self.mix_norm = nn.LayerNorm(dim)
            self.mix_conv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2)
        else:
            self.attn_norm = nn.LayerNorm(dim)
            self.attn = RelPosSelfAttention(dim, n_heads, dropout)
        if kind != "transformer":
            if kind == "pnp":
                depthwise = DepthwisePnpConv(dim, kernel_size, snake_factors, pnp_topology)
            else:
                depthwise = nn.Conv1d(dim, dim, kernel_size,
                                      padding=kernel_size // 2, groups=dim)
            self.conv_module = ConvolutionModule(dim, depthwise, dropout)
        self.final_norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3:
            raise ShapeMismatch(f"expected (B, T, D), got {tuple(x.shape)}")
        x = x + 0.5 * self.ffn1(x)
        if self.kind == "conv":
            y = self.mix_conv(self.mix_norm(x).transpose(1, 2)).transpose(1, 2)
            x = x + self.dropout(y)
        else:
            x = x + self.dropout(self.attn(self.attn_norm(x)))
        if self.kind != "transformer":
            x = x + self.conv_module(x)
        x = x + 0.5 * self.ffn2(x)
        return self.final_norm(x)


class PerFrameMlp(nn.Module):
    """Frame-independent multilayer perceptron trunk (capacity-matched baseline)."""

    def __init__(self, in_dim: int, hidden_dim: int, n_hidden_layers: int):
        super().__init__()
        layers: list[nn.Module] = [nn.Linear(in_dim, hidden_dim), nn.SiLU()]
        for _ in range(n_hidden_layers):
            layers += [nn.Linear(hidden_dim, hidden_dim), nn.SiLU()]
        self.net = nn.Sequential(*layers)
        self.out_dim = hidden_dim

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# Full inverter
# ---------------------------------------------------------------------------

class Inverter(nn.Module):
    """Masked embedding -> block stack (or MLP) -> per-frame linear head.

    Input is ``(B, T, model_dim)`` (already projected); output is
    ``(B, T, out_channels)``. Masking only happens in training mode.
    """

    def __init__(self, config: InverterConfig):
        super().__init__()
        self.config = config
        self.masker = TimeMasker(config.model_dim)
        if config.trunk == "mlp":
            self.mlp = PerFrameMlp(config.model_dim, config.mlp_hidden_dim,
                                   config.mlp_hidden_layers)
            head_in = self.mlp.out_dim
            self.blocks = nn.ModuleList()
        else:
            self.blocks = nn.ModuleList(
                ConformerBlock(
                    config.model_dim,
                    n_heads=config.attention_heads,
                    ffn_expansion=config.ffn_expansion,
                    kernel_size=config.conv_kernel,
                    dropout=config.dropout,
                    kind=kind,
                    snake_factors=config.snake_factors,
                    pnp_topology=config.pnp_topology,
                )
                for kind in config.resolved_layout()
            )
            head_in = config.model_dim
        self.head = nn.Linear(head_in, config.out_channels)

    def forward(self, x: torch.Tensor, mask_seed: int | None = None) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[-1] != self.config.model_dim:
            raise ShapeMismatch(
                f"expected (B, T, {self.config.model_dim}), got {tuple(x.shape)}"
            )
        if self.training and self.config.mask_fraction > 0.0:
            x = self.masker(x, self.config.mask_fraction,
                            self.config.mask_span_frames, seed=mask_seed)
        if self.config.trunk == "mlp":
            x = self.mlp(x)
        else:
            for block in self.blocks:
                x = block(x)
        y = self.head(x)
        return y.squeeze(0) if squeeze else y
