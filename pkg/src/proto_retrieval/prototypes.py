"""Per-video prototype aggregation by cross-attention from a shared learnable bank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MultiHeadAttention


@dataclass
class AggregationTrace:
    weights: list[torch.Tensor]  # per iteration, (B, L^p, L_src), head-averaged

    @property
    def last(self) -> torch.Tensor:
        return self.weights[-1]


@dataclass
class InstancePrototypes:
    prototypes: torch.Tensor  # (B, L^p, D)
    trace: AggregationTrace


class PrototypeGenerator(nn.Module):
    """Shared prototypes adapted to each video by K pre-norm cross-attention updates.

    There is deliberately no self-attention between prototypes and no recurrent
    update, so each prototype attends to the video independently.
    """

    def __init__(self, dim: int, n_prototypes: int, heads: int, iterations: int = 1, init_scale: float = 0.1):
        super().__init__()
        self.bank = nn.Parameter(torch.randn(n_prototypes, dim) * init_scale)
        self.iterations = iterations
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, video, mask=None, iterations: int | None = None) -> InstancePrototypes:
        k_iters = self.iterations if iterations is None else iterations
        if k_iters < 1:
            raise ValueError("iterations must be ≥ 1")
        if video.shape[1] < 1:
            raise ValueError("cannot aggregate an empty video")
        kv = self.norm_kv(video)
        protos = self.bank.expand(video.shape[0], -1, -1)
        weights = []
        for _ in range(k_iters):
            update, attn = self.attn(self.norm_q(protos), kv, kv, mask)
            protos = protos + update
            weights.append(attn)
        return InstancePrototypes(protos, AggregationTrace(weights))


def generate(generator: PrototypeGenerator, video, iterations: int | None = None) -> InstancePrototypes:
    """Aggregate one ``(L_src, D)`` video; outputs keep the batch axis of size 1."""
    v = torch.as_tensor(video, dtype=generator.bank.dtype)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError("cannot aggregate an empty video")
    return generator(v[None], iterations=iterations)


def prototype_similarity(prototypes: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of ``query (..., D)`` to ``prototypes (..., L^p, D)``; zero norms score 0."""
    return torch.einsum("...pd,...d->...p", F.normalize(prototypes, dim=-1), F.normalize(query, dim=-1))


def retrieve(prototypes, query) -> tuple[int, float]:
    """Index and cosine of the prototype most similar to ``query`` (lowest index on ties)."""
    p = np.asarray(prototypes, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if p.ndim != 2 or p.shape[1] != q.shape[0]:
        raise ValueError(f"shape mismatch: prototypes {p.shape}, query {q.shape}")
    p_norm = np.linalg.norm(p, axis=1)
    q_norm = np.linalg.norm(q)
    denom = p_norm * q_norm
    sims = np.divide(p @ q, denom, out=np.zeros(len(p)), where=denom > 0)
    best = int(np.argmax(sims))
    return best, float(sims[best])
