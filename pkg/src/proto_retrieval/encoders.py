"""Frame/clip branch encoders, exhaustive clip construction and query pooling."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn

from .layers import SelfAttentionBlock


def segment_bounds(length: int, units: int) -> np.ndarray:
    """Split ``length`` frames into ``min(units, length)`` contiguous non-empty segments.

    Returns an ``(n, 2)`` array of ``[start, stop)`` frame indices.
    """
    if length < 1 or units < 1:
        raise ValueError("length and units must be ≥ 1")
    n = min(units, length)
    edges = np.floor(np.linspace(0, length, n + 1)).astype(int)
    return np.stack([edges[:-1], edges[1:]], axis=1)


@lru_cache(maxsize=512)
def downsample_matrix(length: int, units: int) -> np.ndarray:
    """``(n_units, length)`` row-stochastic matrix of uniform segment means."""
    bounds = segment_bounds(length, units)
    m = np.zeros((len(bounds), length))
    for row, (a, b) in enumerate(bounds):
        m[row, a:b] = 1.0 / (b - a)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=128)
def span_index(units: int) -> np.ndarray:
    """All contiguous unit spans ``[i, j]`` ordered by ``(j - i, i)``."""
    if units < 1:
        raise ValueError("units must be ≥ 1")
    spans = [(i, i + w) for w in range(units) for i in range(units - w)]
    out = np.array(spans, dtype=int)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=128)
def span_matrix(units: int) -> np.ndarray:
    """``(U(U+1)/2, U)`` matrix mean-pooling every contiguous span of units."""
    spans = span_index(units)
    m = np.zeros((len(spans), units))
    for row, (i, j) in enumerate(spans):
        m[row, i:j + 1] = 1.0 / (j - i + 1)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=512)
def clip_pooling_matrix(length: int, units: int) -> np.ndarray:
    """``(L^c, length)`` map from frame features to exhaustive clip features."""
    down = downsample_matrix(length, units)
    out = span_matrix(down.shape[0]) @ down
    out.setflags(write=False)
    return out


def clip_frame_spans(length: int, units: int) -> np.ndarray:
    """Frame range ``[start, stop)`` covered by each exhaustive clip."""
    bounds = segment_bounds(length, units)
    spans = span_index(len(bounds))
    return np.stack([bounds[spans[:, 0], 0], bounds[spans[:, 1], 1]], axis=1)


def n_clips(units: int) -> int:
    return units * (units + 1) // 2


def exhaustive_clips(features, units: int):
    """Mean-pool every contiguous span of the ``units`` downsampled segments.

    Accepts an ``(L, D)`` numpy array or tensor and returns the same kind with
    ``U(U+1)/2`` rows, where ``U = min(units, L)``.
    """
    if units < 1:
        raise ValueError("units must be ≥ 1")
    length = features.shape[0]
    down = downsample_matrix(length, units)
    spans = span_matrix(down.shape[0])
    if isinstance(features, torch.Tensor):
        down = torch.tensor(down, dtype=features.dtype, device=features.device)
        spans = torch.tensor(spans, dtype=features.dtype, device=features.device)
    return spans @ (down @ features)


class BranchEncoder(nn.Module):
    """Input projection, learned positions and one self-attention block."""

    def __init__(self, d_in: int, dim: int, heads: int, max_len: int, ffn_mult: int = 2):
        super().__init__()
        self.d_in = d_in
        self.max_len = max_len
        self.in_proj = nn.Linear(d_in, dim)
        self.pos = nn.Embedding(max_len, dim)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.block = SelfAttentionBlock(dim, heads, ffn_mult)
        self.norm = nn.LayerNorm(dim)
        self.positional = True

    def forward(self, frames, mask=None):
        if frames.shape[-1] != self.d_in:
            raise ValueError(f"expected feature dim {self.d_in}, got {frames.shape[-1]}")
        if frames.shape[1] > self.max_len:
            raise ValueError(f"sequence length {frames.shape[1]} exceeds max_len {self.max_len}")
        x = self.in_proj(frames)
        if self.positional:
            x = x + self.pos.weight[: frames.shape[1]]
        return self.norm(self.block(x, mask))


def encode_frames(frames, encoder: BranchEncoder):
    """Encode one ``(L^f, D_in)`` video into ``(L^f, D)`` contextual features."""
    x = torch.as_tensor(frames, dtype=encoder.in_proj.weight.dtype)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("frames must be a non-empty (L, D) matrix")
    return encoder(x[None])[0]


class QueryPooler(nn.Module):
    """Project word tokens and pool them with a learned softmax scoring vector."""

    def __init__(self, d_txt: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(d_txt, dim)
        self.score = nn.Linear(dim, 1, bias=False)

    def forward(self, tokens, mask=None):
        """Return pooled ``(B, D)`` tokens and ``(B, L^t)`` pooling weights."""
        if tokens.shape[1] < 1:
            raise ValueError("empty token sequence")
        h = self.proj(tokens)
        logits = self.score(h).squeeze(-1)
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        weights = logits.softmax(dim=-1)
        return (weights.unsqueeze(-1) * h).sum(dim=1), weights


def pool_query(tokens, pooler: QueryPooler):
    x = torch.as_tensor(tokens, dtype=pooler.proj.weight.dtype)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("empty token sequence")
    pooled, weights = pooler(x[None])
    return pooled[0], weights[0]
