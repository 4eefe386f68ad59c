import json

import numpy as np
import pytest
import torch

from proto_retrieval.config import desk_config
from proto_retrieval.gradcheck import grad_check, guidance_point_check
from proto_retrieval.trainer import (
    CheckpointError,
    TrainingDiverged,
    init_state,
    load_checkpoint,
    save_checkpoint,
    step_batch,
    train,
    write_history_csv,
)

CFG = desk_config(seed=4, batch_size=8)


def _fresh(corpus):
    videos, queries = corpus
    return init_state(CFG, videos[0].frames.shape[1], queries[0].tokens.shape[1])


def test_zero_steps_is_a_no_op(small_corpus):
    state = _fresh(small_corpus)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    out = train(*small_corpus, CFG, 0, state=state)
    assert out.step == 0 and out.history == []
    assert all(torch.equal(before[k], v) for k, v in out.model.state_dict().items())


def test_fixed_seed_reproduces_history(small_corpus):
    a = train(*small_corpus, CFG, 50).history
    b = train(*small_corpus, CFG, 50).history
    assert a == b
    assert {r["mixed"] for r in a} == {0, 1}
    assert set(a[0]) == {"step", "mixed", "total", "ret", "crecon", "urecon", "attn", "ortho"}


def test_plain_batches_have_zero_guidance(small_corpus):
    hist = train(*small_corpus, CFG, 20).history
    assert all(r["attn"] == 0.0 for r in hist if not r["mixed"])
    assert any(r["attn"] > 0.0 for r in hist if r["mixed"])


def test_step_batches_cover_epoch(small_corpus):
    _, queries = small_corpus
    per_epoch = len(queries) // CFG.batch_size
    seen = [q.query_id for s in range(per_epoch) for q in step_batch(queries, CFG, s)]
    assert len(seen) == len(set(seen)) == per_epoch * CFG.batch_size


def test_loss_trend_on_overfit_run(overfit_run):
    state, _ = overfit_run
    total = np.array([r["total"] for r in state.history])
    smooth = np.convolve(total, np.ones(100) / 100, mode="valid")
    assert smooth[-1] < smooth[0]


def test_checkpoint_resume_matches_uninterrupted(tmp_path, small_corpus):
    straight = train(*small_corpus, CFG, 2)
    first = train(*small_corpus, CFG, 1)
    save_checkpoint(first, tmp_path / "c.prck")
    resumed = load_checkpoint(tmp_path / "c.prck")
    assert resumed.step == 1
    train(*small_corpus, CFG, 1, state=resumed)
    assert resumed.history[0] == straight.history[1]
    for (k, a), b in zip(straight.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), k


def test_checkpoint_corruption(tmp_path, small_corpus):
    state = train(*small_corpus, CFG, 1)
    path = save_checkpoint(state, tmp_path / "c.prck")
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_non_finite_loss_aborts_with_dump(tmp_path, small_corpus):
    state = _fresh(small_corpus)
    with torch.no_grad():
        state.model.generators["frame"].bank.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(*small_corpus, CFG, 3, state=state, dump_dir=tmp_path)
    dump = json.loads((tmp_path / "diverged_step0.json").read_text())
    assert dump["step"] == 0 and dump["query_ids"]


def test_history_csv_is_stable(tmp_path, small_corpus):
    hist = train(*small_corpus, CFG, 5).history
    write_history_csv(hist, tmp_path / "a.csv")
    write_history_csv(hist, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "step,mixed,total,ret,crecon,urecon,attn,ortho"


def test_too_small_corpus(small_corpus):
    videos, queries = small_corpus
    with pytest.raises(ValueError):
        train(videos[:1], queries, CFG, 1)


@pytest.mark.parametrize("loss", ["ortho", "urecon"])
def test_grad_check_examples(loss):
    result = grad_check(loss, dim=8, n_prototypes=3)
    assert result.n_checked > 0
    assert result.max_rel_error < 1e-4


def test_guidance_clamp_boundary_is_excluded():
    result = guidance_point_check(alpha=1 - 0.2, label=1, beta=0.2)
    assert result.n_excluded == 1 and result.n_checked == 0
    smooth = guidance_point_check(alpha=0.3, label=1, beta=0.2)
    assert smooth.n_checked == 1 and smooth.max_rel_error < 1e-4
