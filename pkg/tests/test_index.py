import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proto_retrieval.index import (
    INDEX_VERSION,
    IndexChecksumError,
    IndexFormatError,
    IndexTruncatedError,
    IndexVersionError,
    PrototypeIndex,
    build_index,
    index_bytes,
    load_index,
    matching_flops,
    memory_footprint,
    parse_index,
    rank,
    rank_scores,
    save_index,
    score,
    score_pooled,
)


def _index(clip, frame, ids=None, w=0.5):
    clip = np.asarray(clip, dtype=np.float32)
    ids = ids or [f"v{i}" for i in range(len(clip))]
    return PrototypeIndex(ids, clip, np.asarray(frame, dtype=np.float32), w)


def test_payload_bytes():
    idx = _index(np.zeros((100, 30, 384)), np.zeros((100, 30, 384)))
    assert idx.payload_bytes == 100 * 2 * 30 * 384 * 4 == 9_216_000


def test_payload_linear_in_prototypes():
    a = _index(np.zeros((3, 10, 8)), np.zeros((3, 10, 8)))
    b = _index(np.zeros((3, 20, 8)), np.zeros((3, 20, 8)))
    assert b.payload_bytes == 2 * a.payload_bytes


def test_build_index(small_state, small_corpus):
    videos, _ = small_corpus
    idx = build_index(small_state.model, videos)
    assert idx.clip.shape == (len(videos), 8, 64) and idx.clip.dtype == np.float32
    again = build_index(small_state.model, videos)
    assert index_bytes(idx) == index_bytes(again)
    with pytest.raises(ValueError):
        build_index(small_state.model, [])


def test_score_arithmetic():
    e = np.eye(2)
    clip = [[[0.8, 0.6]]]
    frame = [[[0.6, 0.8]]]
    assert score_pooled(_index(clip, frame), e[0], e[0])[0, 0] == pytest.approx(0.7, abs=1e-7)
    assert score_pooled(_index(clip, frame, w=1.0), e[0], e[0])[0, 0] == pytest.approx(0.8, abs=1e-7)


def test_duplicates_score_identically():
    r = np.random.default_rng(0)
    p = r.standard_normal((1, 4, 5))
    idx = _index(np.concatenate([p, p]), np.concatenate([p, p]))
    s = score_pooled(idx, r.standard_normal(5), r.standard_normal(5))
    assert s[0, 0] == s[0, 1]


def test_rank_hand_set_and_ties(pooled_stub):
    clip = np.array([[[1, 0, 0], [0, 1, 0]], [[0, 0, 1], [0, 0, 1]], [[1, 1, 0], [0, 0, 0.5]]], dtype=float)
    idx = _index(clip, clip, ids=["a", "b", "c"])
    q = np.array([[1.0, 0.2, 0.0]])
    oracle = {}
    for vid, protos in zip("abc", clip):
        oracle[vid] = max(float(p @ q[0]) / (np.linalg.norm(p) * np.linalg.norm(q[0])) for p in protos)
    expected = sorted("abc", key=lambda v: (-oracle[v], v))
    assert rank(idx, q, pooled_stub) == expected
    assert rank(idx, np.array([[0, 0, 1.0]]), pooled_stub)[0] == "b"
    same = _index(np.ones((3, 2, 3)), np.ones((3, 2, 3)), ids=["z", "x", "y"])
    assert rank(same, q, pooled_stub) == ["x", "y", "z"]


def test_score_with_model(small_state, small_corpus):
    videos, queries = small_corpus
    idx = build_index(small_state.model, videos)
    s = score(idx, queries[0].tokens, small_state.model)
    assert s.shape == (len(videos),)
    ranked = rank(idx, queries[0].tokens, small_state.model)
    assert ranked[0] == idx.video_ids[int(np.argmax(s))]


def test_round_trip_and_errors(tmp_path):
    r = np.random.default_rng(1)
    idx = PrototypeIndex(["α", "b"], r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4)), 0.3, "abc")
    path = save_index(idx, tmp_path / "i.ppvr")
    back = load_index(path)
    assert back.video_ids == idx.video_ids and back.fingerprint == "abc" and back.fusion_weight == 0.3
    assert back.clip.tobytes() == idx.clip.tobytes() and back.frame.tobytes() == idx.frame.tobytes()

    data = path.read_bytes()
    corrupt = bytearray(data)
    corrupt[-20] ^= 0x01
    with pytest.raises(IndexChecksumError):
        parse_index(bytes(corrupt))
    with pytest.raises(IndexTruncatedError):
        parse_index(data[:-30])
    old = bytearray(data)
    old[4:8] = (INDEX_VERSION - 1).to_bytes(4, "little")
    with pytest.raises(IndexVersionError):
        parse_index(bytes(old))
    with pytest.raises(IndexFormatError):
        parse_index(b"XXXX" + data[4:])


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 20), lp=st.integers(1, 6), d=st.integers(1, 12), seed=st.integers(0, 2**31),
       w=st.floats(0, 1))
def test_round_trip_bit_exact(n, lp, d, seed, w):
    r = np.random.default_rng(seed)
    clip = r.standard_normal((n, lp, d)).astype(np.float32)
    clip[r.random(clip.shape) < 0.05] = np.float32(-0.0)
    idx = PrototypeIndex([f"vid{i}" for i in range(n)], clip, r.standard_normal((n, lp, d)), w, "f" * (seed % 17))
    back = parse_index(index_bytes(idx))
    assert back.clip.tobytes() == idx.clip.tobytes()
    assert back.frame.tobytes() == idx.frame.tobytes()
    assert back.video_ids == idx.video_ids and back.fusion_weight == idx.fusion_weight


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_score_invariant_to_query_scale(seed, c):
    r = np.random.default_rng(seed)
    idx = _index(r.standard_normal((5, 3, 4)), r.standard_normal((5, 3, 4)))
    q1, q2 = r.standard_normal(4), r.standard_normal(4)
    assert np.allclose(score_pooled(idx, q1, q2), score_pooled(idx, c * q1, c * q2), atol=1e-12)


def test_rank_scores_tie_rule():
    order = rank_scores(np.array([0.5, 0.9, 0.5, 0.9]), ["d", "c", "b", "a"])
    assert order.tolist() == [3, 1, 2, 0]


@pytest.mark.parametrize("lp,mb", [(10, 0.03), (20, 0.06), (30, 0.09), (60, 0.18)])
def test_memory_footprint(lp, mb):
    assert memory_footprint(lp, 384) == mb


@pytest.mark.parametrize("n,gf", [(1000, 0.05), (2000, 0.09), (3000, 0.14), (4000, 0.18)])
def test_matching_flops(n, gf):
    assert matching_flops(n, 30, 384) == gf


def test_accounting_unrounded_and_guards():
    assert matching_flops(1000, 30, 384, digits=None) == pytest.approx(0.04608)
    assert memory_footprint(30, 384, digits=None) == pytest.approx(0.09216)
    with pytest.raises(ValueError):
        matching_flops(0, 30, 384)
    with pytest.raises(ValueError):
        memory_footprint(30, 0)
