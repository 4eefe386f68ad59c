"""Dual-branch prototypical retrieval model."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import objectives as obj
from .config import HyperParams
from .encoders import (
    BranchEncoder,
    QueryPooler,
    clip_frame_spans,
    clip_pooling_matrix,
    downsample_matrix,
)
from .prototypes import InstancePrototypes, PrototypeGenerator

BRANCHES = ("clip", "frame")


@dataclass
class VideoBatch:
    frames: torch.Tensor        # (B, L, D_in), capped at max_frames
    mask: torch.Tensor          # (B, L) valid frames
    clip_pool: torch.Tensor     # (B, L^c, L) frame -> clip pooling
    clip_mask: torch.Tensor     # (B, L^c)
    lengths: list[int]          # capped lengths
    cap_maps: list[np.ndarray]  # (capped, original) segment-mean maps
    membership: dict | None = None  # branch -> (B, L_src) share of the first source

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class BranchOutput:
    instances: InstancePrototypes
    features: torch.Tensor  # frame-level encoded features (B, L, D)


def prepare_videos(frame_list, config: HyperParams, memberships=None, dtype=torch.float32) -> VideoBatch:
    """Pad a list of ``(L_i, D_in)`` arrays into a batch with clip pooling matrices."""
    capped, cap_maps, members = [], [], []
    for i, frames in enumerate(frame_list):
        frames = np.asarray(frames, dtype=np.float64)
        cap = downsample_matrix(len(frames), config.max_frames)
        cap_maps.append(cap)
        capped.append(cap @ frames if cap.shape[0] < len(frames) else frames)
        if memberships is not None:
            m = np.asarray(memberships[i], dtype=np.float64)
            members.append(cap @ m if cap.shape[0] < len(frames) else m)
    lengths = [len(f) for f in capped]
    b, l_max, d_in = len(capped), max(lengths), capped[0].shape[1]
    pools = [clip_pooling_matrix(n, config.clip_units) for n in lengths]
    c_max = max(p.shape[0] for p in pools)

    frames = np.zeros((b, l_max, d_in))
    mask = np.zeros((b, l_max), dtype=bool)
    clip_pool = np.zeros((b, c_max, l_max))
    clip_mask = np.zeros((b, c_max), dtype=bool)
    for i, (f, p) in enumerate(zip(capped, pools)):
        frames[i, : len(f)] = f
        mask[i, : len(f)] = True
        clip_pool[i, : p.shape[0], : p.shape[1]] = p
        clip_mask[i, : p.shape[0]] = True

    membership = None
    if memberships is not None:
        fm = np.zeros((b, l_max))
        for i, m in enumerate(members):
            fm[i, : len(m)] = m
        cm = np.einsum("bcl,bl->bc", clip_pool, fm)
        membership = {"frame": torch.tensor(fm, dtype=dtype), "clip": torch.tensor(cm, dtype=dtype)}

    return VideoBatch(
        frames=torch.tensor(frames, dtype=dtype),
        mask=torch.tensor(mask),
        clip_pool=torch.tensor(clip_pool, dtype=dtype),
        clip_mask=torch.tensor(clip_mask),
        lengths=lengths,
        cap_maps=cap_maps,
        membership=membership,
    )


def pad_tokens(token_list, dtype=torch.float32):
    lengths = [len(t) for t in token_list]
    out = np.zeros((len(token_list), max(lengths), token_list[0].shape[1]))
    mask = np.zeros((len(token_list), max(lengths)), dtype=bool)
    for i, t in enumerate(token_list):
        out[i, : len(t)] = t
        mask[i, : len(t)] = True
    return torch.tensor(out, dtype=dtype), torch.tensor(mask), lengths


def attention_to_frames(weights: np.ndarray, branch: str, length: int, original_length: int,
                        cap_map: np.ndarray, clip_units: int) -> np.ndarray:
    """Map ``(L^p, L_src)`` attention onto the original frame axis, preserving mass.

    Clip attention is spread uniformly over each clip's frame span; capped frames
    are spread uniformly over the original frames they pooled.
    """
    w = np.asarray(weights, dtype=np.float64)
    if branch == "clip":
        spans = clip_frame_spans(length, clip_units)
        spread = np.zeros((len(spans), length))
        for row, (a, b) in enumerate(spans):
            spread[row, a:b] = 1.0 / (b - a)
        w = w[..., : len(spans)] @ spread
    else:
        w = w[..., :length]
    if cap_map.shape[0] < original_length:
        w = w @ cap_map
    return w


class ProtoPRVR(nn.Module):
    def __init__(self, config: HyperParams, d_in: int, d_txt: int, max_query_len: int = 64):
        super().__init__()
        self.config = config
        self.d_in = d_in
        self.d_txt = d_txt
        self.max_query_len = max_query_len
        d, h = config.d_model, config.n_heads
        self.encoders = nn.ModuleDict(
            {b: BranchEncoder(d_in, d, h, config.max_frames, config.ffn_mult) for b in BRANCHES}
        )
        self.poolers = nn.ModuleDict({b: QueryPooler(d_txt, d) for b in BRANCHES})
        self.generators = nn.ModuleDict(
            {b: PrototypeGenerator(d, config.n_prototypes, h, config.n_agg_iters) for b in BRANCHES}
        )
        self.cross_decoders = nn.ModuleDict(
            {b: obj.CrossModalDecoder(d_txt, d, h, max_query_len) for b in BRANCHES}
        )
        self.uni_decoders = nn.ModuleDict(
            {b: obj.UniModalDecoder(d, config.max_frames, config.ffn_mult) for b in BRANCHES}
        )
        self.mask_embedding = nn.Parameter(torch.randn(d_txt) * 0.02)

    @property
    def dtype(self):
        return self.mask_embedding.dtype

    # ── Forward pieces ──────────────────────────────────────

    def encode_videos(self, vb: VideoBatch) -> dict[str, BranchOutput]:
        out = {}
        feats = self.encoders["frame"](vb.frames, vb.mask)
        out["frame"] = BranchOutput(self.generators["frame"](feats, vb.mask), feats)
        feats = self.encoders["clip"](vb.frames, vb.mask)
        clips = vb.clip_pool @ feats
        out["clip"] = BranchOutput(self.generators["clip"](clips, vb.clip_mask), feats)
        return out

    def encode_queries(self, tokens, mask=None) -> dict[str, torch.Tensor]:
        return {b: self.poolers[b](tokens, mask)[0] for b in BRANCHES}

    def branch_scores(self, queries: dict, videos: dict):
        """Per branch: max-over-prototype cosine ``(Q, V)`` and argmax prototype ``(Q, V)``."""
        scores, best = {}, {}
        for b in BRANCHES:
            protos = videos[b].instances.prototypes if isinstance(videos[b], BranchOutput) else videos[b]
            sims = torch.einsum(
                "qd,vpd->qvp",
                nn.functional.normalize(queries[b], dim=-1),
                nn.functional.normalize(protos, dim=-1),
            )
            scores[b], best[b] = sims.max(dim=-1)
        return scores, best

    def fuse(self, scores: dict):
        w = self.config.fusion_weight
        return w * scores["clip"] + (1 - w) * scores["frame"]

    # ── Losses ──────────────────────────────────────────────

    def losses(self, vb: VideoBatch, tokens, token_mask, pairing, masked_idx,
               ignore=None, labels=None) -> dict[str, torch.Tensor]:
        """All loss components for a batch.

        ``pairing[i]`` is the column of query ``i``'s positive video in ``vb``.
        Guidance is computed only when ``vb.membership`` and ``labels`` are given.
        """
        cfg = self.config
        pairing = torch.as_tensor(pairing, dtype=torch.long)
        videos = self.encode_videos(vb)
        queries = self.encode_queries(tokens, token_mask)
        scores, best = self.branch_scores(queries, videos)
        parts = {
            "ret": obj.retrieval_loss(
                self.fuse(scores), pairing, cfg.triplet_margin, cfg.lambda_nce, cfg.nce_scale, ignore
            )
        }
        rows = torch.arange(len(pairing))
        masked_tokens = tokens.clone()
        masked_tokens[:, masked_idx] = self.mask_embedding.to(tokens.dtype)
        crecon, urecon, attn, ortho = [], [], [], []
        for b in BRANCHES:
            protos = videos[b].instances.prototypes
            chosen = best[b][rows, pairing]
            retrieved = protos[pairing, chosen]
            recon = self.cross_decoders[b](masked_tokens, retrieved, token_mask)
            crecon.append(obj.crecon_loss(recon, tokens, masked_idx, cfg.crecon_scale))

            target = videos[b].features.detach()
            recon_v, _ = self.uni_decoders[b](protos, target.shape[1])
            urecon.append(obj.urecon_loss(recon_v, target, vb.mask))

            ortho.append(obj.ortho_loss(protos))

            if vb.membership is not None and labels is not None:
                trace = videos[b].instances.trace.last[pairing]
                attn.append(obj.guidance_loss(
                    trace, vb.membership[b][pairing], chosen, torch.as_tensor(labels), cfg.beta
                ))
        parts["crecon"] = sum(crecon) / len(crecon)
        parts["urecon"] = sum(urecon) / len(urecon)
        parts["ortho"] = sum(ortho) / len(ortho)
        parts["attn"] = sum(attn) / len(attn) if attn else torch.zeros((), dtype=self.dtype)
        return parts

    # ── Inference helpers ───────────────────────────────────

    @torch.no_grad()
    def video_prototypes(self, frame_list, batch_size: int = 64) -> dict[str, np.ndarray]:
        """Instance prototypes ``(N, L^p, D)`` per branch, in float32."""
        self.eval()
        out = {b: [] for b in BRANCHES}
        for start in range(0, len(frame_list), batch_size):
            chunk = frame_list[start:start + batch_size]
            for f in chunk:
                if np.asarray(f).shape[1] != self.d_in:
                    raise ValueError(f"video feature dim {np.asarray(f).shape[1]} != model d_in {self.d_in}")
            vb = prepare_videos(chunk, self.config, dtype=self.dtype)
            enc = self.encode_videos(vb)
            for b in BRANCHES:
                out[b].append(enc[b].instances.prototypes.to(torch.float32).numpy())
        return {b: np.concatenate(v) for b, v in out.items()}

    @torch.no_grad()
    def query_tokens(self, token_list, batch_size: int = 256) -> dict[str, np.ndarray]:
        """Pooled query token ``(Q, D)`` per branch, in float64."""
        self.eval()
        out = {b: [] for b in BRANCHES}
        for start in range(0, len(token_list), batch_size):
            chunk = [np.asarray(t) for t in token_list[start:start + batch_size]]
            for t in chunk:
                if t.ndim != 2 or t.shape[0] < 1:
                    raise ValueError("empty token sequence")
                if t.shape[1] != self.d_txt:
                    raise ValueError(f"token dim {t.shape[1]} != model d_txt {self.d_txt}")
            tokens, mask, _ = pad_tokens(chunk, self.dtype)
            enc = self.encode_queries(tokens, mask)
            for b in BRANCHES:
                out[b].append(enc[b].to(torch.float64).numpy())
        return {b: np.concatenate(v) for b, v in out.items()}

    @torch.no_grad()
    def attention(self, frames, memberships=None):
        """Last-iteration attention ``(L^p, L_src)`` and prototypes per branch for one video."""
        self.eval()
        vb = prepare_videos([frames], self.config, dtype=self.dtype)
        enc = self.encode_videos(vb)
        return vb, {
            b: (enc[b].instances.trace.last[0].to(torch.float64).numpy(),
                enc[b].instances.prototypes[0].to(torch.float64).numpy())
            for b in BRANCHES
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().to(torch.float32).contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

