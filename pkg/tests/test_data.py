import struct

import numpy as np
import pytest

from proto_retrieval.data import (
    CorpusError,
    DanglingTargetError,
    DimensionMismatchError,
    EmptyQueryError,
    MalformedHeaderError,
    QueryRecord,
    SyntheticSpec,
    TruncatedStreamError,
    VideoRecord,
    batch_iterator,
    generate_synthetic_corpus,
    load_corpus,
    load_synthetic_spec,
    mix_videos,
    save_corpus,
)


def test_generation_is_seeded():
    a = generate_synthetic_corpus(SyntheticSpec(n_videos=4, seed=7))
    b = generate_synthetic_corpus(SyntheticSpec(n_videos=4, seed=7))
    assert a == b
    assert generate_synthetic_corpus(SyntheticSpec(n_videos=4, seed=8)) != a


def test_noiseless_single_event_frames_identical():
    videos, _ = generate_synthetic_corpus(SyntheticSpec(n_videos=3, n_event_types=1, noise_scale=0.0, seed=1))
    for v in videos:
        assert np.all(v.frames == v.frames[0])


def test_targets_exist():
    videos, queries = generate_synthetic_corpus(SyntheticSpec(n_videos=64))
    assert len(videos) == 64
    ids = {v.video_id for v in videos}
    assert all(q.target_video_id in ids for q in queries)
    per_video = {vid: 0 for vid in ids}
    for q in queries:
        per_video[q.target_video_id] += 1
    assert min(per_video.values()) >= 2


def test_rejects_tiny_feature_dim():
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticSpec(feature_dim=1))


def test_moment_frames_closer_to_query_than_the_rest():
    margins = []
    for seed in range(20):
        videos, queries = generate_synthetic_corpus(SyntheticSpec(n_videos=6, noise_scale=0.1, seed=seed))
        by_id = {v.video_id: v for v in videos}
        for q in queries:
            v = by_id[q.target_video_id]
            st, ed = v.moment_for(q.query_id)
            t = q.tokens.mean(0)
            cos = v.frames @ t / (np.linalg.norm(v.frames, axis=1) * np.linalg.norm(t))
            inside = np.zeros(v.length, dtype=bool)
            inside[st:ed + 1] = True
            if (~inside).any():
                margins.append(cos[inside].mean() - cos[~inside].mean())
    assert np.mean(margins) > 0
    assert np.mean(np.array(margins) > 0) > 0.95


def test_spec_file(tmp_path):
    p = tmp_path / "spec.txt"
    p.write_text("n_videos = 5  # few\nframes_per_event = 2,3\nnoise_scale = 0.05\n")
    spec = load_synthetic_spec(p)
    assert spec.n_videos == 5 and spec.frames_per_event == (2, 3) and spec.noise_scale == 0.05
    p.write_text("bogus = 1\n")
    with pytest.raises(ValueError):
        load_synthetic_spec(p)


def test_corpus_round_trip(tmp_path, small_corpus):
    videos, queries = small_corpus
    path = save_corpus(videos, queries, tmp_path)
    assert path.name == "corpus.prvc"
    assert load_corpus(tmp_path) == (videos, queries)
    assert load_corpus(path) == (videos, queries)


def _write(tmp_path, videos, queries):
    return save_corpus(videos, queries, tmp_path / "c.prvc")


def test_truncated_stream(tmp_path, small_corpus):
    path = _write(tmp_path, *small_corpus)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(TruncatedStreamError, match="unexpected end of stream"):
        load_corpus(path)


def test_bad_magic(tmp_path, small_corpus):
    path = _write(tmp_path, *small_corpus)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(MalformedHeaderError):
        load_corpus(path)


def test_empty_query_in_file(tmp_path):
    v = VideoRecord("a", np.ones((3, 4)))
    q = QueryRecord("q", np.ones((1, 4)), "a")
    path = _write(tmp_path, [v], [q])
    data = bytearray(path.read_bytes())
    # query block: str id "q" then u32 L; set L to 0 and drop the payload
    qpos = data.rindex(b"\x01\x00\x00\x00q") + 5
    struct.pack_into("<I", data, qpos, 0)
    payload = 4 * 4
    del data[qpos + 8: qpos + 8 + payload]
    path.write_bytes(bytes(data))
    with pytest.raises(EmptyQueryError, match="empty query"):
        load_corpus(path)


def test_dangling_and_dimension_errors(tmp_path):
    v = VideoRecord("a", np.ones((3, 4)))
    path = _write(tmp_path, [v], [QueryRecord("q", np.ones((2, 4)), "missing")])
    with pytest.raises(DanglingTargetError):
        load_corpus(path)
    w = VideoRecord("b", np.ones((3, 5)))
    path = _write(tmp_path, [v, w], [QueryRecord("q", np.ones((2, 4)), "a")])
    with pytest.raises(DimensionMismatchError):
        load_corpus(path)
    assert issubclass(DimensionMismatchError, CorpusError)


def test_record_invariants():
    with pytest.raises(CorpusError):
        VideoRecord("a", np.ones((3, 2)), [("q", 1, 3)])
    with pytest.raises(EmptyQueryError):
        QueryRecord("q", np.zeros((0, 4)), "a")


def test_batches_partition_queries(small_corpus):
    videos, queries = small_corpus
    qs = queries[:10]
    sizes = [len(b.queries) for b in batch_iterator(videos, qs, 4, seed=0)]
    assert sizes == [4, 4, 2]
    first = [[q.query_id for q in b.queries] for b in batch_iterator(videos, qs, 4, seed=5)]
    again = [[q.query_id for q in b.queries] for b in batch_iterator(videos, qs, 4, seed=5)]
    assert first == again
    assert sorted(sum(first, [])) == sorted(q.query_id for q in qs)
    for b in batch_iterator(videos, qs, 4, seed=0):
        assert [v.video_id for v in b.videos] == [q.target_video_id for q in b.queries]


def test_batch_size_one_rejected(small_corpus):
    with pytest.raises(ValueError):
        next(batch_iterator(*small_corpus, 1, seed=0))


def test_mix_videos_construction():
    v1 = VideoRecord("a", np.arange(16, dtype=float).reshape(8, 2))
    v2 = VideoRecord("b", -np.arange(16, dtype=float).reshape(8, 2))
    mv = mix_videos(v1, v2, query_first=True, subsample=2)
    assert len(mv.frames) == 8
    assert mv.membership.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]
    assert mv.label == 1
    assert np.array_equal(mv.frames[:4], v1.frames[::2])
    assert mix_videos(v1, v2, query_first=False).label == 0
    assert len(mix_videos(v1, v2, True, subsample=1).frames) == 16
    odd = VideoRecord("c", np.ones((7, 2)))
    assert mix_videos(odd, v2, True, 2).membership.sum() == 4
    with pytest.raises(ValueError):
        mix_videos(v1, VideoRecord("a", np.ones((3, 2))), True)
