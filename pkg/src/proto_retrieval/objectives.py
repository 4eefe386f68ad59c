"""Training objectives: retrieval, dual reconstruction, weak guidance and orthogonality."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import FeedForward, MultiHeadAttention

LOG_EPS = 1e-6


class NonFiniteLossError(FloatingPointError):
    pass


# ── Cross-modal masked reconstruction ───────────────────────

def choose_mask(lengths, mask_ratio: float, seed) -> np.ndarray:
    """Masked positions shared by the whole batch.

    ``|M| = ceil(mask_ratio * L)`` where ``L`` is the shortest query, so every
    index is valid for every query.
    """
    lengths = np.atleast_1d(np.asarray(lengths))
    shortest = int(lengths.min())
    if shortest < 1:
        raise ValueError("queries must have at least one token")
    count = min(shortest, max(1, math.ceil(mask_ratio * shortest - 1e-9)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(shortest, size=count, replace=False))


def mask_queries(tokens, mask_ratio: float, seed, mask_embedding=None, lengths=None):
    """Replace a shared random subset of token positions by the mask embedding.

    ``tokens`` is ``(B, L, D_txt)`` (or ``(L, D_txt)`` for one query).
    Returns the masked tokens and the index tensor ``M``.
    """
    t = torch.as_tensor(tokens)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None]
    if lengths is None:
        lengths = [t.shape[1]] * t.shape[0]
    idx = torch.as_tensor(choose_mask(lengths, mask_ratio, seed), dtype=torch.long)
    fill = torch.zeros(t.shape[-1], dtype=t.dtype) if mask_embedding is None else mask_embedding
    masked = t.clone()
    masked[:, idx] = fill.to(t.dtype)
    return (masked[0] if squeeze else masked), idx


class CrossModalDecoder(nn.Module):
    """Reconstruct masked word tokens from a single retrieved prototype.

    Tokens cross-attend to the prototype, then self-attend among themselves.
    """

    def __init__(self, d_txt: int, dim: int, heads: int, max_len: int = 64):
        super().__init__()
        self.fc_q = nn.Linear(d_txt, dim)
        self.fc_k = nn.Linear(dim, dim)
        self.fc_v = nn.Linear(dim, dim)
        self.pos = nn.Embedding(max_len, dim)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.out = nn.Linear(dim, d_txt)

    def cross(self, masked_tokens, prototype, mask=None):
        if prototype.ndim == 3:
            if prototype.shape[1] != 1:
                raise ValueError(
                    f"cross-modal decoding takes exactly one prototype per query, got {prototype.shape[1]}"
                )
            prototype = prototype[:, 0]
        q = self.fc_q(masked_tokens) + self.pos.weight[: masked_tokens.shape[1]]
        kv_k = self.fc_k(prototype)[:, None]
        kv_v = self.fc_v(prototype)[:, None]
        update, attn = self.cross_attn(q, kv_k, kv_v)
        return q + update, attn

    def forward(self, masked_tokens, prototype, mask=None):
        x, _ = self.cross(masked_tokens, prototype, mask)
        h = self.norm(x)
        x = x + self.self_attn(h, h, h, mask)[0]
        return self.out(x)


def crossmodal_decode(masked_tokens, prototype, decoder: CrossModalDecoder):
    return decoder(masked_tokens, prototype)


def crecon_loss(recon, targets, masked_idx, scale: float = 1.0):
    """InfoNCE of each reconstructed masked token against all masked tokens in the batch.

    ``recon`` and ``targets`` are ``(B, L, D_txt)``; similarities are cosines.
    """
    m = len(masked_idx)
    if m == 0:
        raise ValueError("no masked positions")
    b = recon.shape[0]
    r = F.normalize(recon[:, masked_idx], dim=-1)
    t = F.normalize(targets[:, masked_idx], dim=-1)
    logits = torch.einsum("bid,cjd->bicj", r, t).reshape(b * m, b * m) * scale
    target = torch.arange(b * m)
    return F.cross_entropy(logits, target)


# ── Uni-modal reconstruction ────────────────────────────────

class UniModalDecoder(nn.Module):
    """Broadcast each prototype over frame positions and decode a softmax mixture."""

    def __init__(self, dim: int, max_len: int, mult: int = 2):
        super().__init__()
        self.pos = nn.Embedding(max_len, dim)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mult),
            nn.GELU(),
            FeedForward(dim * mult, 1, out_dim=dim + 1),
        )

    def forward(self, prototypes, length: int):
        """Return ``(B, length, D)`` reconstruction and ``(B, L^p, length)`` mixing weights."""
        if length < 1:
            raise ValueError("length must be ≥ 1")
        x = prototypes[:, :, None, :] + self.pos.weight[:length]
        decoded = self.mlp(x)
        vectors, logits = decoded[..., :-1], decoded[..., -1]
        weights = logits.softmax(dim=1)
        return (weights.unsqueeze(-1) * vectors).sum(dim=1), weights


def unimodal_decode(prototypes, length: int, decoder: UniModalDecoder):
    p = torch.as_tensor(prototypes)
    squeeze = p.ndim == 2
    recon, _ = decoder(p[None] if squeeze else p, length)
    return recon[0] if squeeze else recon


def urecon_loss(recon, target, mask=None):
    """Mean squared error; with a ``(B, L)`` frame mask, averaged per video then over the batch."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    sq = (recon - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)
    per_video = (sq.mean(dim=-1) * m).sum(dim=-1) / m.sum(dim=-1)
    return per_video.mean()


# ── Weak guidance ───────────────────────────────────────────

def guidance_alpha(trace, membership, retrieved_index):
    """Attention mass the retrieved prototype puts on the first source video."""
    if trace.shape[-1] != membership.shape[-1]:
        raise ValueError(
            f"membership length {membership.shape[-1]} does not match attention length {trace.shape[-1]}"
        )
    rows = trace[torch.arange(trace.shape[0]), retrieved_index]
    return (rows * membership).sum(dim=-1)


def guidance_bce(alpha, label, beta: float):
    a = torch.as_tensor(alpha)
    y = torch.as_tensor(label, dtype=a.dtype)
    pos = torch.log(torch.clamp(a + beta, LOG_EPS, 1.0))
    neg = torch.log(torch.clamp(1.0 - (a - beta), LOG_EPS, 1.0))
    return -(y * pos + (1 - y) * neg)


def guidance_loss(trace, membership, retrieved_index, label, beta: float):
    """Margin-softened BCE on the retrieved prototype's mass over the first video, batch mean."""
    alpha = guidance_alpha(trace, membership, retrieved_index)
    return guidance_bce(alpha, label, beta).mean()


# ── Prototype diversification ───────────────────────────────

def ortho_loss(prototypes):
    """Frobenius distance of the clipped cosine Gram matrix from identity, per ``L^p(L^p-1)``."""
    p = prototypes if prototypes.ndim == 3 else prototypes[None]
    n = p.shape[1]
    if n < 2:
        raise ValueError("orthogonality needs at least two prototypes")
    norms = p.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm prototype")
    unit = p / norms
    gram = unit @ unit.transpose(-1, -2)
    eye = torch.eye(n, dtype=p.dtype)
    diff = torch.clamp(gram, min=0.0) - eye
    sq = diff.pow(2).sum(dim=(-1, -2))
    # sqrt has no gradient at 0 (all pairs already non-positive); use 0 there
    positive = sq > 0
    norm = torch.where(positive, torch.where(positive, sq, 1.0).sqrt(), 0.0)
    return (norm / (n * (n - 1))).mean()


# ── Retrieval ───────────────────────────────────────────────

def retrieval_terms(sims, pairing, margin: float, nce_scale: float = 1.0, ignore=None):
    """Bidirectional hardest-negative triplet term and bidirectional InfoNCE term.

    ``sims`` is ``(Q, V)``; ``pairing[i]`` is the positive column of query ``i``.
    ``ignore`` marks (query, video) pairs that are neither positive nor negative.
    """
    n_q, n_v = sims.shape
    if n_q < 2 or n_v < 2:
        raise ValueError("retrieval loss needs at least two queries and two videos")
    pairing = torch.as_tensor(pairing, dtype=torch.long)
    rows = torch.arange(n_q)
    positive = torch.zeros(n_q, n_v, dtype=torch.bool)
    positive[rows, pairing] = True
    negative = ~positive
    if ignore is not None:
        negative &= ~torch.as_tensor(ignore, dtype=torch.bool)
    pos = sims[rows, pairing]
    neg_inf = torch.tensor(float("-inf"), dtype=sims.dtype)

    hard_q = torch.where(negative, sims, neg_inf).max(dim=1).values
    col_neg = negative[:, pairing]  # (Q', Q): query k is a negative for the video of query i
    hard_v = torch.where(col_neg, sims[:, pairing], neg_inf).max(dim=0).values
    triplet = _hinge(margin + hard_q - pos).mean() + _hinge(margin + hard_v - pos).mean()

    logits = sims * nce_scale
    keep = negative | positive
    q2v = torch.where(keep, logits, neg_inf)
    nce_q = -(pos * nce_scale - torch.logsumexp(q2v, dim=1)).mean()
    cols = torch.unique(pairing)
    col_logits = torch.where(keep[:, cols], logits[:, cols], neg_inf)
    col_pos = torch.where(positive[:, cols], logits[:, cols], neg_inf)
    nce_v = -(torch.logsumexp(col_pos, dim=0) - torch.logsumexp(col_logits, dim=0)).mean()
    return triplet, nce_q + nce_v


def _hinge(x):
    # rows without any negative produce -inf and contribute zero
    return torch.clamp(torch.nan_to_num(x, neginf=0.0), min=0.0)


def retrieval_loss(sims, pairing, margin: float, lambda_nce: float, nce_scale: float = 1.0, ignore=None):
    triplet, nce = retrieval_terms(sims, pairing, margin, nce_scale, ignore)
    return triplet + lambda_nce * nce


# ── Total ───────────────────────────────────────────────────

LOSS_WEIGHTS = {
    "ret": "lambda_ret",
    "crecon": "lambda_crecon",
    "urecon": "lambda_urecon",
    "attn": "lambda_attn",
    "ortho": "lambda_ortho",
}


def total_loss(parts: dict, config):
    """Weighted sum of the component losses; missing components count as zero."""
    total = 0.0
    for name, value in parts.items():
        if name not in LOSS_WEIGHTS:
            raise KeyError(f"unknown loss component {name!r}")
        scalar = float(value.detach() if torch.is_tensor(value) else value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(f"loss component {name!r} is {scalar}")
        total = total + getattr(config, LOSS_WEIGHTS[name]) * value
    return total
