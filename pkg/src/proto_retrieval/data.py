"""Feature corpora: synthetic generation, binary storage, batching and video mixing."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CORPUS_MAGIC = b"PRVC"
CORPUS_VERSION = 1
CORPUS_FILENAME = "corpus.prvc"


class CorpusError(ValueError):
    pass


class MalformedHeaderError(CorpusError):
    pass


class TruncatedStreamError(CorpusError):
    pass


class DimensionMismatchError(CorpusError):
    pass


class DanglingTargetError(CorpusError):
    pass


class EmptyQueryError(CorpusError):
    pass


@dataclass
class VideoRecord:
    video_id: str
    frames: np.ndarray  # (L^f, D_in) float32
    moments: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusError(f"video {self.video_id!r}: frames must be a non-empty (L, D) matrix")
        n = self.frames.shape[0]
        for qid, start, end in self.moments:
            if not 0 <= start <= end < n:
                raise CorpusError(f"video {self.video_id!r}: moment {qid!r} [{start}, {end}] outside 0..{n - 1}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def moment_for(self, query_id: str) -> tuple[int, int] | None:
        for qid, start, end in self.moments:
            if qid == query_id:
                return start, end
        return None

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and np.array_equal(self.frames, other.frames)
            and list(self.moments) == list(other.moments)
        )


@dataclass
class QueryRecord:
    query_id: str
    tokens: np.ndarray  # (L^t, D_txt) float32
    target_video_id: str

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise EmptyQueryError(f"empty query {self.query_id!r}")

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and self.target_video_id == other.target_video_id
            and np.array_equal(self.tokens, other.tokens)
        )


@dataclass
class MixedVideo:
    frames: np.ndarray
    membership: np.ndarray  # per frame, share belonging to the first source
    label: int  # 1 iff the query's video is the first source
    source_ids: tuple[str, str] = ("", "")


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 64
    n_event_types: int = 1024
    events_per_video: tuple[int, int] = (3, 5)
    frames_per_event: tuple[int, int] = (4, 10)
    feature_dim: int = 64
    noise_scale: float = 0.1
    queries_per_video: tuple[int, int] = (2, 3)
    events_per_query: tuple[int, int] = (1, 2)
    tokens_per_event: tuple[int, int] = (2, 4)
    seed: int = 0

    def check(self) -> None:
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be ≥ 2")
        for name in ("n_videos", "n_event_types"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be ≥ 1")
        for name in ("events_per_video", "frames_per_event", "queries_per_video",
                     "events_per_query", "tokens_per_event"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range with 1 ≤ lo ≤ hi (got {lo}, {hi})")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be ≥ 0")


def generate_synthetic_corpus(spec: SyntheticSpec) -> tuple[list[VideoRecord], list[QueryRecord]]:
    """Videos are runs of noisy event embeddings; queries are noisy tokens of one event run.

    Noise is isotropic with expected norm ``noise_scale`` against unit-norm events.
    """
    spec.check()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    events = rng.standard_normal((spec.n_event_types, d))
    events /= np.linalg.norm(events, axis=1, keepdims=True)
    sigma = spec.noise_scale / math.sqrt(d)

    def between(lo_hi):
        return int(rng.integers(lo_hi[0], lo_hi[1] + 1))

    width = len(str(spec.n_videos - 1))
    videos, queries = [], []
    for v in range(spec.n_videos):
        vid = f"v{v:0{width}d}"
        n_events = between(spec.events_per_video)
        types = rng.integers(0, spec.n_event_types, size=n_events)
        lengths = [between(spec.frames_per_event) for _ in range(n_events)]
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
        frames = np.concatenate(
            [events[t] + sigma * rng.standard_normal((n, d)) for t, n in zip(types, lengths)]
        )
        moments = []
        for q in range(between(spec.queries_per_video)):
            run = min(between(spec.events_per_query), n_events)
            first = int(rng.integers(0, n_events - run + 1))
            tokens = np.concatenate([
                events[types[e]] + sigma * rng.standard_normal((between(spec.tokens_per_event), d))
                for e in range(first, first + run)
            ])
            qid = f"{vid}q{q}"
            start = int(starts[first])
            end = int(starts[first + run - 1] + lengths[first + run - 1] - 1)
            moments.append((qid, start, end))
            queries.append(QueryRecord(qid, tokens, vid))
        videos.append(VideoRecord(vid, frames, moments))
    return videos, queries


def load_synthetic_spec(path) -> SyntheticSpec:
    """Read a flat ``key = value`` spec file; ranges are written ``lo,hi``."""
    defaults = SyntheticSpec()
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, tuple):
            parts = [int(p) for p in raw.replace(" ", "").split(",")]
            values[key] = (parts[0], parts[-1])
        elif isinstance(current, float):
            values[key] = float(raw)
        else:
            values[key] = int(raw)
    return SyntheticSpec(**values)


# ── Binary corpus format ────────────────────────────────────
# magic "PRVC" | u32 version | u32 n_videos | u32 n_queries
# video:  str id | u32 L | u32 D | f32[L*D] | u32 n_moments | (str qid, u32 start, u32 end)*
# query:  str id | u32 L | u32 D | f32[L*D] | str target_id
# str = u32 byte length + UTF-8 bytes; all little-endian.

def _write_str(out, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def _write_matrix(out, m: np.ndarray) -> None:
    out.write(struct.pack("<II", *m.shape))
    out.write(m.astype("<f4", copy=False).tobytes(order="C"))


def save_corpus(videos, queries, path) -> Path:
    """Write a corpus; ``path`` may be a directory (``corpus.prvc`` inside) or a file."""
    path = Path(path)
    if path.is_dir():
        path = path / CORPUS_FILENAME
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC)
    buf.write(struct.pack("<III", CORPUS_VERSION, len(videos), len(queries)))
    for v in videos:
        _write_str(buf, v.video_id)
        _write_matrix(buf, v.frames)
        buf.write(struct.pack("<I", len(v.moments)))
        for qid, start, end in v.moments:
            _write_str(buf, qid)
            buf.write(struct.pack("<II", start, end))
    for q in queries:
        _write_str(buf, q.query_id)
        _write_matrix(buf, q.tokens)
        _write_str(buf, q.target_video_id)
    path.write_bytes(buf.getvalue())
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"unexpected end of stream at byte {self.pos} (wanted {n}, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeaderError(f"invalid UTF-8 id at byte {self.pos - n}") from exc

    def matrix(self, what: str) -> np.ndarray:
        rows, cols = self.u32(), self.u32()
        if rows == 0:
            if what == "query":
                raise EmptyQueryError("empty query (L^t = 0)")
            raise CorpusError("empty video (L^f = 0)")
        raw = self.take(4 * rows * cols)
        return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)


def load_corpus(path) -> tuple[list[VideoRecord], list[QueryRecord]]:
    path = Path(path)
    if path.is_dir():
        path = path / CORPUS_FILENAME
    r = _Reader(path.read_bytes())
    if len(r.data) < 16:
        raise MalformedHeaderError(f"{path}: header too short ({len(r.data)} bytes)")
    magic = bytes(r.take(4))
    if magic != CORPUS_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}, expected {CORPUS_MAGIC!r}")
    version = r.u32()
    if version != CORPUS_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported corpus version {version}")
    n_videos, n_queries = r.u32(), r.u32()

    videos, video_dim = [], None
    for _ in range(n_videos):
        vid = r.string()
        frames = r.matrix("video")
        if video_dim is not None and frames.shape[1] != video_dim:
            raise DimensionMismatchError(f"video {vid!r} has D={frames.shape[1]}, expected {video_dim}")
        video_dim = frames.shape[1]
        moments = []
        for _ in range(r.u32()):
            qid = r.string()
            start, end = r.u32(), r.u32()
            moments.append((qid, start, end))
        videos.append(VideoRecord(vid, frames, moments))

    known = {v.video_id for v in videos}
    queries, text_dim = [], None
    for _ in range(n_queries):
        qid = r.string()
        tokens = r.matrix("query")
        if text_dim is not None and tokens.shape[1] != text_dim:
            raise DimensionMismatchError(f"query {qid!r} has D={tokens.shape[1]}, expected {text_dim}")
        text_dim = tokens.shape[1]
        target = r.string()
        if target not in known:
            raise DanglingTargetError(f"query {qid!r} targets unknown video {target!r}")
        queries.append(QueryRecord(qid, tokens, target))
    if r.pos != len(r.data):
        raise MalformedHeaderError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return videos, queries


# ── Batching ────────────────────────────────────────────────

@dataclass
class Batch:
    queries: list[QueryRecord]
    videos: list[VideoRecord]  # target video of each query, aligned with ``queries``


def epoch_order(n_queries: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_queries)


def batch_iterator(videos, queries, batch_size: int, seed: int, epochs: int | None = 1,
                   drop_last: bool = False) -> Iterator[Batch]:
    """Shuffled query batches paired with their target videos.

    Each epoch's order depends only on ``(seed, epoch)``. ``epochs=None`` streams forever.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be ≥ 2 for in-batch negatives")
    by_id = {v.video_id: v for v in videos}
    epoch = 0
    while epochs is None or epoch < epochs:
        order = epoch_order(len(queries), seed, epoch)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            qs = [queries[i] for i in idx]
            yield Batch(qs, [by_id[q.target_video_id] for q in qs])
        epoch += 1


def mix_videos(v1: VideoRecord, v2: VideoRecord, query_first: bool, subsample: int = 2) -> MixedVideo:
    """Concatenate two stride-subsampled videos; membership marks the first one."""
    if v1.video_id == v2.video_id:
        raise ValueError(f"cannot mix video {v1.video_id!r} with itself")
    if subsample < 1:
        raise ValueError("subsample must be ≥ 1")
    a, b = v1.frames[::subsample], v2.frames[::subsample]
    membership = np.concatenate([np.ones(len(a)), np.zeros(len(b))]).astype(np.float32)
    return MixedVideo(
        frames=np.concatenate([a, b]),
        membership=membership,
        label=int(bool(query_first)),
        source_ids=(v1.video_id, v2.video_id),
    )
