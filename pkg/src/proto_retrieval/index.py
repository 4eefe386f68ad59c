"""Prototype index: build, persist, score, rank, and efficiency accounting."""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INDEX_MAGIC = b"PPVR"
INDEX_VERSION = 1
BYTES_PER_FLOAT = 4


class IndexFormatError(ValueError):
    pass


class IndexVersionError(IndexFormatError):
    pass


class IndexTruncatedError(IndexFormatError):
    pass


class IndexChecksumError(IndexFormatError):
    pass


@dataclass
class PrototypeIndex:
    video_ids: list[str]
    clip: np.ndarray   # (N, L^p, D) float32
    frame: np.ndarray  # (N, L^p, D) float32
    fusion_weight: float = 0.5
    fingerprint: str = ""

    def __post_init__(self):
        self.clip = np.ascontiguousarray(self.clip, dtype=np.float32)
        self.frame = np.ascontiguousarray(self.frame, dtype=np.float32)
        if self.clip.shape != self.frame.shape or self.clip.ndim != 3:
            raise ValueError(f"branch shapes differ: {self.clip.shape} vs {self.frame.shape}")
        if len(self.video_ids) != self.clip.shape[0]:
            raise ValueError("one id per video required")

    def __len__(self):
        return len(self.video_ids)

    @property
    def n_prototypes(self) -> int:
        return self.clip.shape[1]

    @property
    def dim(self) -> int:
        return self.clip.shape[2]

    @property
    def payload_bytes(self) -> int:
        return self.clip.nbytes + self.frame.nbytes

    def branch(self, name: str) -> np.ndarray:
        return {"clip": self.clip, "frame": self.frame}[name]


def build_index(model, videos, batch_size: int = 64) -> PrototypeIndex:
    """Run both branches over ``videos`` and keep only their instance prototypes."""
    if not videos:
        raise ValueError("cannot build an index from an empty corpus")
    protos = model.video_prototypes([v.frames for v in videos], batch_size)
    return PrototypeIndex(
        video_ids=[v.video_id for v in videos],
        clip=protos["clip"],
        frame=protos["frame"],
        fusion_weight=model.config.fusion_weight,
        fingerprint=model.fingerprint(),
    )


# ── Scoring ─────────────────────────────────────────────────

def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def branch_similarities(prototypes: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Cosine of each query ``(Q, D)`` with every prototype ``(N, L^p, D)`` -> ``(Q, N, L^p)``."""
    return np.einsum("qd,npd->qnp", _unit(queries), _unit(prototypes))


def score_pooled(index: PrototypeIndex, clip_query, frame_query) -> np.ndarray:
    """Fused max-prototype scores ``(Q, N)`` from already pooled query tokens."""
    clip_q = np.atleast_2d(clip_query)
    frame_q = np.atleast_2d(frame_query)
    s_clip = branch_similarities(index.clip, clip_q).max(axis=-1)
    s_frame = branch_similarities(index.frame, frame_q).max(axis=-1)
    w = index.fusion_weight
    return w * s_clip + (1 - w) * s_frame


def score(index: PrototypeIndex, tokens, model) -> np.ndarray:
    """Fused score of one query's word tokens against every indexed video."""
    if len(index) == 0:
        raise ValueError("index is empty")
    pooled = model.query_tokens([np.asarray(tokens)])
    return score_pooled(index, pooled["clip"], pooled["frame"])[0]


def rank_scores(scores: np.ndarray, video_ids: list[str]) -> np.ndarray:
    """Positions of videos by descending score; ties go to the smaller id."""
    id_order = np.argsort(np.array(video_ids, dtype=object), kind="stable")
    id_rank = np.empty(len(video_ids), dtype=np.int64)
    id_rank[id_order] = np.arange(len(video_ids))
    return np.lexsort((id_rank, -np.asarray(scores)))


def rank(index: PrototypeIndex, tokens, model) -> list[str]:
    order = rank_scores(score(index, tokens, model), index.video_ids)
    return [index.video_ids[i] for i in order]


def target_ranks(scores: np.ndarray, video_ids: list[str], targets: list[str]) -> np.ndarray:
    """1-based rank of each query's target under the tie rule of :func:`rank_scores`."""
    column = {vid: i for i, vid in enumerate(video_ids)}
    out = np.empty(len(targets), dtype=np.int64)
    for q, target in enumerate(targets):
        order = rank_scores(scores[q], video_ids)
        out[q] = int(np.nonzero(order == column[target])[0][0]) + 1
    return out


# ── Persistence ─────────────────────────────────────────────
# magic "PPVR" | u32 version | u32 L^p | u32 D | u32 N | f64 fusion_weight
# | str fingerprint | str id * N | f32 clip[N*L^p*D] | f32 frame[N*L^p*D] | u32 crc32
# str = u32 byte length + UTF-8 bytes; little-endian throughout.

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def index_bytes(index: PrototypeIndex) -> bytes:
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<IIII", INDEX_VERSION, index.n_prototypes, index.dim, len(index)))
    buf.write(struct.pack("<d", index.fusion_weight))
    buf.write(_pack_str(index.fingerprint))
    for vid in index.video_ids:
        buf.write(_pack_str(vid))
    buf.write(index.clip.astype("<f4", copy=False).tobytes())
    buf.write(index.frame.astype("<f4", copy=False).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_index(index: PrototypeIndex, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(index_bytes(index))
    tmp.replace(path)
    return path


def parse_index(data: bytes) -> PrototypeIndex:
    if len(data) < 4 or data[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {bytes(data[:4])!r}, expected {INDEX_MAGIC!r}")
    if len(data) < 8:
        raise IndexTruncatedError("truncated index header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != INDEX_VERSION:
        raise IndexVersionError(f"index version {version} is not supported (expected {INDEX_VERSION})")
    if len(data) < 36:
        raise IndexTruncatedError("truncated index header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        # distinguish a short file from corrupted content where possible
        _check_length(data)
        raise IndexChecksumError("index checksum mismatch")
    n_protos, dim, n = struct.unpack_from("<III", data, 8)
    (fusion,) = struct.unpack_from("<d", data, 20)
    pos = 28
    strings = []
    for _ in range(n + 1):
        (length,) = struct.unpack_from("<I", data, pos)
        strings.append(data[pos + 4: pos + 4 + length].decode("utf-8"))
        pos += 4 + length
    count = n * n_protos * dim
    clip = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(n, n_protos, dim)
    frame = np.frombuffer(data, dtype="<f4", count=count, offset=pos + 4 * count).reshape(n, n_protos, dim)
    return PrototypeIndex(strings[1:], clip.copy(), frame.copy(), fusion, strings[0])


def _check_length(data: bytes) -> None:
    try:
        n_protos, dim, n = struct.unpack_from("<III", data, 8)
        pos = 28
        for _ in range(n + 1):
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4 + length
        expected = pos + 2 * BYTES_PER_FLOAT * n * n_protos * dim + 4
    except struct.error:
        raise IndexTruncatedError("unexpected end of index data") from None
    if len(data) < expected:
        raise IndexTruncatedError(f"index truncated: {len(data)} of {expected} bytes")


def load_index(path) -> PrototypeIndex:
    return parse_index(Path(path).read_bytes())


# ── Accounting ──────────────────────────────────────────────

def memory_footprint(n_prototypes: int, dim: int, branches: int = 2, digits: int | None = 2) -> float:
    """Stored megabytes (10^6 bytes) per video for 32-bit prototypes."""
    _positive(n_prototypes=n_prototypes, dim=dim, branches=branches)
    mb = branches * n_prototypes * dim * BYTES_PER_FLOAT / 1e6
    return round(mb, digits) if digits is not None else mb


def matching_flops(n_videos: int, n_prototypes: int, dim: int, branches: int = 2,
                   digits: int | None = 2) -> float:
    """GFLOPs to match one query against the corpus: a multiply-add per dimension per prototype."""
    _positive(n_videos=n_videos, n_prototypes=n_prototypes, dim=dim, branches=branches)
    gflops = n_videos * n_prototypes * 2 * dim * branches / 1e9
    return round(gflops, digits) if digits is not None else gflops


def _positive(**values):
    for name, value in values.items():
        if value < 1:
            raise ValueError(f"{name} must be ≥ 1 (got {value})")
