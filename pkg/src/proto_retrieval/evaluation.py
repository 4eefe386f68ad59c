"""Retrieval metrics, efficiency report and attention analyses."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .data import mix_videos
from .index import (
    PrototypeIndex,
    branch_similarities,
    matching_flops,
    memory_footprint,
    score_pooled,
    target_ranks,
)
from .model import BRANCHES, attention_to_frames

RECALL_KS = (1, 5, 10, 100)
DEFAULT_RATIO_EDGES = (0.05, 0.1, 0.2, 0.4, 1.0)


def recall_at_k(ranks, k: int) -> float:
    """Percentage of queries whose target is ranked within the top ``k`` (ranks are 1-based)."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no queries to evaluate")
    if (ranks < 1).any():
        raise ValueError("ranks are 1-based")
    return 100.0 * float(np.count_nonzero(ranks <= k)) / ranks.size


def recalls(ranks) -> dict[str, float]:
    out = {f"R@{k}": recall_at_k(ranks, k) for k in RECALL_KS}
    out["SumR"] = sum(out[f"R@{k}"] for k in RECALL_KS)
    return out


@dataclass
class MetricsReport:
    r1: float
    r5: float
    r10: float
    r100: float
    sumr: float
    ranks: np.ndarray
    query_ids: list[str]
    memory_mb: float
    matching_gflops: float
    ms_per_query: float = 0.0
    encode_ms_per_query: float = 0.0
    analyses: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks, query_ids, memory_mb=0.0, matching_gflops=0.0, **timing):
        r = recalls(ranks)
        return cls(r["R@1"], r["R@5"], r["R@10"], r["R@100"], r["SumR"], np.asarray(ranks),
                   list(query_ids), memory_mb, matching_gflops, **timing)

    def recall_row(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "R@100": self.r100, "SumR": self.sumr}


def evaluate(index: PrototypeIndex, queries, model) -> MetricsReport:
    known = set(index.video_ids)
    for q in queries:
        if q.target_video_id not in known:
            raise KeyError(f"query {q.query_id!r} targets {q.target_video_id!r}, which is not indexed")
    t0 = time.perf_counter()
    pooled = model.query_tokens([q.tokens for q in queries])
    t1 = time.perf_counter()
    scores = score_pooled(index, pooled["clip"], pooled["frame"])
    t2 = time.perf_counter()
    ranks = target_ranks(scores, index.video_ids, [q.target_video_id for q in queries])
    n = max(len(queries), 1)
    return MetricsReport.from_ranks(
        ranks,
        [q.query_id for q in queries],
        memory_mb=memory_footprint(index.n_prototypes, index.dim),
        matching_gflops=matching_flops(len(index), index.n_prototypes, index.dim),
        ms_per_query=1e3 * (t2 - t1) / n,
        encode_ms_per_query=1e3 * (t1 - t0) / n,
    )


# ── Attention analyses ──────────────────────────────────────

def expanded_span(start: int, end: int) -> tuple[float, float]:
    """Moment bounds widened on both sides by a twentieth of the moment duration."""
    margin = (end - start) / 20.0
    return start - margin, end + margin


def attention_moment_mass(attention, spans, length: int):
    """Attention mass inside the (margin-expanded) moment spans, per prototype.

    ``attention`` is ``(L^p, length)`` or ``(length,)`` over frames; ``spans`` is one
    ``(start, end)`` pair or a list of them (inclusive frame indices).
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape[-1] != length:
        raise ValueError(f"attention covers {attention.shape[-1]} frames, video has {length}")
    if np.ndim(spans) == 1:
        spans = [spans]
    frames = np.arange(length)
    inside = np.zeros(length, dtype=bool)
    for start, end in spans:
        if not 0 <= start <= end < length:
            raise ValueError(f"span [{start}, {end}] outside video of length {length}")
        lo, hi = expanded_span(start, end)
        inside |= (frames >= lo) & (frames <= hi)
    return attention[..., inside].sum(axis=-1)


def mass_by_similarity_rank(attention, prototypes, query, span, length: int) -> np.ndarray:
    """In-moment mass of each prototype, most query-similar prototype first."""
    sims = branch_similarities(np.asarray(prototypes)[None], np.asarray(query)[None])[0, 0]
    order = np.argsort(-sims, kind="stable")
    return attention_moment_mass(attention, span, length)[order]


def frame_attention(model, frames) -> dict:
    """Per branch: last-iteration attention mapped to frames ``(L^p, L^f)`` and prototypes."""
    vb, per_branch = model.attention(frames)
    out = {}
    for b in BRANCHES:
        weights, protos = per_branch[b]
        out[b] = (
            attention_to_frames(weights, b, vb.lengths[0], len(frames), vb.cap_maps[0],
                                model.config.clip_units),
            protos,
        )
    return out


def attention_similarity_correlation(model, videos, queries, branches=BRANCHES) -> dict:
    """Spearman correlation between prototype-query similarity and in-moment attention mass.

    Returns the per-branch mean over queries with a recorded moment, the overall
    mean, and the per-query values. Queries whose masses are constant are skipped.
    """
    by_id = {v.video_id: v for v in videos}
    pooled = model.query_tokens([q.tokens for q in queries])
    cache, per_branch = {}, {b: [] for b in branches}
    for qi, q in enumerate(queries):
        video = by_id[q.target_video_id]
        span = video.moment_for(q.query_id)
        if span is None:
            continue
        if video.video_id not in cache:
            cache[video.video_id] = frame_attention(model, video.frames)
        for b in branches:
            attn, protos = cache[video.video_id][b]
            sims = branch_similarities(protos[None], pooled[b][qi][None])[0, 0]
            mass = attention_moment_mass(attn, span, video.length)
            if np.ptp(mass) == 0 or np.ptp(sims) == 0:
                continue
            per_branch[b].append(float(spearmanr(sims, mass).statistic))
    means = {b: float(np.mean(v)) if v else float("nan") for b, v in per_branch.items()}
    pooled_values = [x for v in per_branch.values() for x in v]
    means["mean"] = float(np.mean(pooled_values)) if pooled_values else float("nan")
    return {"mean": means, "per_query": per_branch}


def matching_frequency(index: PrototypeIndex, pooled: dict, targets: list[str]) -> dict[str, np.ndarray]:
    """How often each prototype slot is the best match inside the ground-truth video."""
    column = {vid: i for i, vid in enumerate(index.video_ids)}
    out = {}
    for b in BRANCHES:
        counts = np.zeros(index.n_prototypes, dtype=np.int64)
        if targets:
            protos = index.branch(b)[[column[t] for t in targets]]
            q = np.atleast_2d(pooled[b])
            sims = np.einsum("qpd,qd->qp", _unit(protos), _unit(q))
            np.add.at(counts, sims.argmax(axis=1), 1)
        out[b] = counts
    return out


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def moment_ratios(videos, queries) -> np.ndarray:
    """Moment length over video length for each query (inclusive frame spans)."""
    by_id = {v.video_id: v for v in videos}
    out = []
    for q in queries:
        v = by_id[q.target_video_id]
        span = v.moment_for(q.query_id)
        if span is None:
            raise KeyError(f"no moment annotation for query {q.query_id!r}")
        out.append((span[1] - span[0] + 1) / v.length)
    return np.array(out)


def moment_ratio_breakdown(ranks, ratios, edges=DEFAULT_RATIO_EDGES) -> list[dict]:
    """Recall metrics per moment-to-video ratio bin ``(lo, hi]``; empty bins report zero counts."""
    ranks = np.asarray(ranks)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ranks.shape != ratios.shape:
        raise ValueError("one ratio per query required")
    if ((ratios <= 0) | (ratios > 1)).any():
        raise ValueError("moment-to-video ratios must lie in (0, 1]")
    lows = (0.0,) + tuple(edges[:-1])
    rows = []
    for lo, hi in zip(lows, edges):
        sel = (ratios > lo) & (ratios <= hi)
        row = {"lo": lo, "hi": hi, "count": int(sel.sum())}
        if sel.any():
            row.update(recalls(ranks[sel]))
        else:
            row.update({f"R@{k}": 0.0 for k in RECALL_KS} | {"SumR": 0.0})
        rows.append(row)
    return rows


# ── Guidance diagnostics ────────────────────────────────────

def guidance_alignment(model, videos, queries, n_instances: int = 200, seed: int = 0) -> dict:
    """Mean attention mass the retrieved prototype puts on the query's own half of a mixed video."""
    rng = np.random.default_rng(seed)
    by_id = {v.video_id: v for v in videos}
    ids = [v.video_id for v in videos]
    pooled = model.query_tokens([q.tokens for q in queries])
    values = {b: [] for b in BRANCHES}
    for _ in range(n_instances):
        qi = int(rng.integers(len(queries)))
        q = queries[qi]
        partner = ids[int(rng.integers(len(ids) - 1))]
        if partner == q.target_video_id:
            partner = ids[-1]
        first = bool(rng.random() < 0.5)
        a, b = (q.target_video_id, partner) if first else (partner, q.target_video_id)
        mv = mix_videos(by_id[a], by_id[b], first, model.config.mix_subsample)
        attn = frame_attention(model, mv.frames)
        for br in BRANCHES:
            weights, protos = attn[br]
            sims = branch_similarities(protos[None], pooled[br][qi][None])[0, 0]
            alpha_first = float(weights[int(np.argmax(sims))] @ mv.membership)
            values[br].append(alpha_first if first else 1.0 - alpha_first)
    out = {b: float(np.mean(v)) for b, v in values.items()}
    out["mean"] = float(np.mean([out[b] for b in BRANCHES]))
    return out
