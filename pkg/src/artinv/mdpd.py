"""Multi-duration critic over articulatory trajectories.

Each sub-discriminator augments the trajectory matrix with learnable
channel-split and channel-end rows, reshapes it into tokens whose width is
one candidate phoneme duration, and scores every token through a stack of
single-head attention/convolution blocks. Running several durations in
parallel lets the critic judge channel relationships at several phonological
time scales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeMismatch
from .inverter import ConformerBlock, _mix_seed, sample_mask_indices

N_SENSORS = 6


@dataclass
class MdpdConfig:
    durations_ms: tuple[int, ...] = (60, 90, 100, 150, 180)
    ema_rate_hz: int = 100
    n_channels: int = 18
    n_layers_per_sub: int = 6
    model_dim: int = 256
    ffn_expansion: int = 4
    conv_kernel: int = 5
    dropout: float = 0.0
    # When set, blocks run at the token width itself instead of model_dim.
    native_token_dim: bool = False
    mask_fraction: float = 0.15
    mask_span: int = 10

    def __post_init__(self):
        self.durations_ms = tuple(self.durations_ms)
        if not self.durations_ms:
            raise ValueError("need at least one duration")
        for d in self.durations_ms:
            frames = d * self.ema_rate_hz / 1000.0
            if frames <= 0 or frames != int(frames):
                raise ValueError(f"duration {d} ms is not a whole number of frames")
        if self.n_channels % N_SENSORS != 0:
            raise ValueError("channel count must be divisible by the sensor count")

    @property
    def duration_frames(self) -> tuple[int, ...]:
        return tuple(int(d * self.ema_rate_hz / 1000) for d in self.durations_ms)

    @property
    def augmented_channels(self) -> int:
        # one split row after each sensor but the last, plus one end row
        return self.n_channels + N_SENSORS


def embedding_row_positions(n_channels: int) -> list[int]:
    """Row indices the inserted embedding rows occupy in the augmented matrix."""
    group = n_channels // N_SENSORS
    positions = [(s + 1) * group + s for s in range(N_SENSORS - 1)]
    positions.append(n_channels + N_SENSORS - 1)
    return positions


def reshape_for_duration(x: torch.Tensor, t_pd: int) -> torch.Tensor:
    """Cut each channel row into width-``t_pd`` segments, channel-major.

    ``x`` is ``(..., C_D, T)``; time is zero-padded up to a multiple of
    ``t_pd`` and the result is ``(..., C_D * ceil(T / t_pd), t_pd)``.
    """
    T = x.shape[-1]
    n_seg = math.ceil(T / t_pd)
    pad = n_seg * t_pd - T
    if pad:
        x = torch.nn.functional.pad(x, (0, pad))
    tokens = x.reshape(*x.shape[:-1], n_seg, t_pd)
    return tokens.flatten(-3, -2)


def undo_reshape(tokens: torch.Tensor, n_channels: int) -> torch.Tensor:
    """Inverse of :func:`reshape_for_duration`; returns the padded ``(..., C_D, T_pad)``."""
    L, t_pd = tokens.shape[-2], tokens.shape[-1]
    if L % n_channels != 0:
        raise ShapeMismatch(f"{L} tokens do not split into {n_channels} channels")
    n_seg = L // n_channels
    x = tokens.unflatten(-2, (n_channels, n_seg))
    return x.reshape(*x.shape[:-3], n_channels, n_seg * t_pd)


def _tile_row(vec: torch.Tensor, n_frames: int) -> torch.Tensor:
    reps = math.ceil(n_frames / vec.shape[0])
    return vec.repeat(reps)[:n_frames]


class SubDiscriminator(nn.Module):
    """Critic for one phoneme duration.

    Channel-split/end rows are learnable length-``t_pd`` vectors tiled along
    time, so after reshaping every embedding-derived token is the same
    recognizable vector.
    """

    def __init__(self, config: MdpdConfig, t_pd_frames: int):
        super().__init__()
        self.config = config
        self.t_pd = t_pd_frames
        self.split_rows = nn.Parameter(torch.randn(N_SENSORS - 1, t_pd_frames) * 0.02)
        self.end_row = nn.Parameter(torch.randn(t_pd_frames) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(t_pd_frames) * 0.02)
        dim = t_pd_frames if config.native_token_dim else config.model_dim
        self.embed = nn.Linear(t_pd_frames, dim)
        self.blocks = nn.ModuleList(
            ConformerBlock(dim, n_heads=1, ffn_expansion=config.ffn_expansion,
                           kernel_size=config.conv_kernel, dropout=config.dropout,
                           kind="conformer")
            for _ in range(config.n_layers_per_sub)
        )
        self.score_head = nn.Linear(dim, 1)

    def insert_channel_embeddings(self, ema: torch.Tensor) -> torch.Tensor:
        """``(B, C, T) -> (B, C + 6, T)``: split rows between sensors, end row last."""
        squeeze = ema.dim() == 2
        if squeeze:
            ema = ema.unsqueeze(0)
        C = self.config.n_channels
        if ema.dim() != 3 or ema.shape[1] != C:
            raise ShapeMismatch(f"expected (B, {C}, T), got {tuple(ema.shape)}")
        B, _, T = ema.shape
        group = C // N_SENSORS
        rows = []
        for s in range(N_SENSORS):
            rows.append(ema[:, s * group: (s + 1) * group])
            if s < N_SENSORS - 1:
                tiled = _tile_row(self.split_rows[s], T)
                rows.append(tiled.expand(B, 1, T))
        rows.append(_tile_row(self.end_row, T).expand(B, 1, T))
        out = torch.cat(rows, dim=1)
        return out.squeeze(0) if squeeze else out

    def forward(self, ema: torch.Tensor, mask_seed: int | None = None):
        """Returns (per-token scores ``(B, L)``, feature maps: embed + each block)."""
        squeeze = ema.dim() == 2
        if squeeze:
            ema = ema.unsqueeze(0)
        augmented = self.insert_channel_embeddings(ema)
        tokens = reshape_for_duration(augmented, self.t_pd)      # (B, L, t_pd)
        if self.training and self.config.mask_fraction > 0.0:
            tokens = self._mask_tokens(tokens, mask_seed)
        h = self.embed(tokens)
        fmaps = [h]
        for block in self.blocks:
            h = block(h)
            fmaps.append(h)
        scores = self.score_head(h).squeeze(-1)
        if squeeze:
            return scores.squeeze(0), [m.squeeze(0) for m in fmaps]
        return scores, fmaps

    def _mask_tokens(self, tokens: torch.Tensor, seed: int | None) -> torch.Tensor:
        if seed is None:
            seed = int(torch.randint(0, 2 ** 31 - 1, (1,)).item())
        out = tokens.clone()
        for b in range(tokens.shape[0]):
            rng = np.random.default_rng(_mix_seed(seed, self.t_pd, b))
            idx = sample_mask_indices(tokens.shape[1], self.config.mask_fraction,
                                      self.config.mask_span, rng)
            if idx.size:
                out[b, torch.from_numpy(idx)] = self.mask_token.to(tokens.dtype)
        return out


class Mdpd(nn.Module):
    """The full mixture: one sub-discriminator per configured duration."""

    def __init__(self, config: MdpdConfig):
        super().__init__()
        self.config = config
        self.subs = nn.ModuleList(
            SubDiscriminator(config, t) for t in config.duration_frames
        )

    def insert_channel_embeddings(self, ema: torch.Tensor, sub_index: int) -> torch.Tensor:
        return self.subs[sub_index].insert_channel_embeddings(ema)

    def forward(self, ema: torch.Tensor, mask_seed: int | None = None):
        """Returns a list over durations of (scores, feature map list)."""
        if mask_seed is None:
            mask_seed = int(torch.randint(0, 2 ** 31 - 1, (1,)).item())
        return [sub(ema, mask_seed=_mix_seed(mask_seed, i))
                for i, sub in enumerate(self.subs)]
