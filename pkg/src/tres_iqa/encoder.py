"""Transformer encoder over the fused CNN feature grid.

Post-norm layout: every sub-layer is followed by a residual add and a layer
norm. The 2D sine positional encoding is added to queries and keys (never to
values) at every layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    n_layers: int = 2
    width: int = 64
    heads: int = 16
    ffn_dim: int | None = None
    pe_temperature: float = 10000.0
    use_pe: bool = True

    def __post_init__(self):
        if self.n_layers < 0 or self.width < 1 or self.heads < 1:
            raise ValueError("n_layers must be >= 0, width and heads positive")
        if self.width % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.width

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def positional_encoding(rows: int, cols: int, d: int, temperature: float = 10000.0,
                        dtype=torch.float32) -> torch.Tensor:
    """Sine/cosine encoding of a ``rows x cols`` grid, returned as ``(rows*cols, d)``.

    The first ``d/2`` channels encode the row index and the last ``d/2`` the
    column index; within each half, even channels hold sines and odd channels
    cosines of geometrically spaced frequencies. Positions are counted from 1.
    """
    if d % 4:
        raise ValueError(f"positional encoding width must be divisible by 4, got {d}")
    half = d // 2
    i = torch.arange(half, dtype=torch.float64)
    dim_t = temperature ** (2 * torch.div(i, 2, rounding_mode="floor") / half)
    y = torch.arange(1, rows + 1, dtype=torch.float64)[:, None, None] / dim_t
    x = torch.arange(1, cols + 1, dtype=torch.float64)[None, :, None] / dim_t
    y = torch.stack((y[..., 0::2].sin(), y[..., 1::2].cos()), dim=-1).flatten(-2)
    x = torch.stack((x[..., 0::2].sin(), x[..., 1::2].cos()), dim=-1).flatten(-2)
    pe = torch.cat((y.expand(rows, cols, half), x.expand(rows, cols, half)), dim=-1)
    return pe.reshape(rows * cols, d).to(dtype)


def flatten_grid(x: torch.Tensor) -> torch.Tensor:
    """(b, d, m, n) -> (b, m*n, d), row-major over the grid."""
    return x.flatten(2).transpose(1, 2)


def unflatten_grid(tokens: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """(b, m*n, d) -> (b, d, m, n)."""
    b, length, d = tokens.shape
    if length != rows * cols:
        raise ValueError(f"cannot unflatten {length} tokens into a {rows}x{cols} grid")
    return tokens.transpose(1, 2).reshape(b, d, rows, cols)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"heads ({heads}) must divide width ({width})")
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x):
        b, length, _ = x.shape
        return x.view(b, length, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, pe: torch.Tensor | None = None) -> torch.Tensor:
        qk_in = x if pe is None else x + pe
        q = self._split(self.q_proj(qk_in))
        k = self._split(self.k_proj(qk_in))
        v = self._split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = F.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        heads = weights @ v
        b, _, length, _ = heads.shape
        return self.out_proj(heads.transpose(1, 2).reshape(b, length, -1))


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, width: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(width, heads)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, ffn_dim)
        self.norm2 = nn.LayerNorm(width)

    def forward(self, x, pe=None):
        x = self.norm1(x + self.attn(x, pe))
        return self.norm2(x + self.ffn(x))


class TransformerEncoder(nn.Module):
    """Project the fused features to width ``d``, then run ``n_layers`` encoder layers.

    Input ``(b, C, m, n)``, output ``(b, d, m, n)``.
    """

    def __init__(self, in_channels: int, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        cfg = self.config
        self.project = nn.Conv2d(in_channels, cfg.width, 1)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.width, cfg.heads, cfg.ffn_dim) for _ in range(cfg.n_layers)
        )

    def project_tokens(self, fused: torch.Tensor) -> torch.Tensor:
        return flatten_grid(self.project(fused))

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        rows, cols = fused.shape[-2:]
        x = self.project_tokens(fused)
        pe = None
        if self.config.use_pe:
            pe = positional_encoding(rows, cols, self.config.width, self.config.pe_temperature,
                                     dtype=x.dtype).to(x.device)
        for layer in self.layers:
            x = layer(x, pe)
        return unflatten_grid(x, rows, cols)

    def attention_weights(self) -> list[torch.Tensor]:
        return [layer.attn.last_weights for layer in self.layers]
