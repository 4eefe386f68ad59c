import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from proto_retrieval.config import default_config
from proto_retrieval.objectives import (
    CrossModalDecoder,
    NonFiniteLossError,
    UniModalDecoder,
    choose_mask,
    crecon_loss,
    crossmodal_decode,
    guidance_loss,
    mask_queries,
    ortho_loss,
    retrieval_loss,
    retrieval_terms,
    total_loss,
    unimodal_decode,
    urecon_loss,
)

D = torch.float64


def test_mask_sizes():
    assert len(choose_mask([10], 0.3, 0)) == 3
    assert len(choose_mask([1], 0.01, 0)) == 1
    assert len(choose_mask([1], 1.0, 0)) == 1
    assert np.array_equal(choose_mask([20, 15], 0.3, 9), choose_mask([20, 15], 0.3, 9))
    assert choose_mask([20, 6], 0.5, 1).max() < 6


def test_mask_queries_uses_embedding():
    tokens = torch.randn(3, 10, 4)
    fill = torch.full((4,), 7.0)
    masked, idx = mask_queries(tokens, 0.3, seed=2, mask_embedding=fill)
    assert len(idx) == 3
    assert torch.equal(masked[:, idx], fill.expand(3, 3, 4))
    keep = [i for i in range(10) if i not in idx.tolist()]
    assert torch.equal(masked[:, keep], tokens[:, keep])


@pytest.fixture
def cross_decoder():
    torch.manual_seed(0)
    return CrossModalDecoder(d_txt=6, dim=8, heads=2).double()


def test_cross_decode_shape_and_single_key(cross_decoder):
    tokens = torch.randn(2, 12, 6, dtype=D)
    proto = torch.randn(2, 1, 8, dtype=D)
    assert crossmodal_decode(tokens, proto, cross_decoder).shape == (2, 12, 6)
    _, attn = cross_decoder.cross(tokens, proto)
    assert torch.allclose(attn, torch.ones(2, 12, 1, dtype=D))


def test_cross_decode_rejects_several_prototypes(cross_decoder):
    with pytest.raises(ValueError):
        cross_decoder(torch.randn(2, 5, 6, dtype=D), torch.randn(2, 3, 8, dtype=D))


def test_zero_self_attention_values_reduce_to_cross_output(cross_decoder):
    with torch.no_grad():
        for p in (*cross_decoder.self_attn.v_proj.parameters(), *cross_decoder.self_attn.out_proj.parameters()):
            p.zero_()
    tokens, proto = torch.randn(2, 5, 6, dtype=D), torch.randn(2, 1, 8, dtype=D)
    ca, _ = cross_decoder.cross(tokens, proto)
    assert torch.allclose(cross_decoder(tokens, proto), cross_decoder.out(ca))


def test_crecon_closed_forms():
    t = torch.randn(1, 4, 5, dtype=D)
    assert float(crecon_loss(t, t, torch.tensor([2]))) == pytest.approx(0.0, abs=1e-12)
    e = torch.eye(2, dtype=D)
    targets = e[:, None, :]  # two queries, one token each, orthogonal
    loss = crecon_loss(targets.clone(), targets, torch.tensor([0]))
    assert float(loss) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert float(loss) == pytest.approx(0.3133, abs=1e-4)


def test_crecon_permutation_symmetry():
    torch.manual_seed(1)
    r, t = torch.randn(4, 5, 3, dtype=D), torch.randn(4, 5, 3, dtype=D)
    idx = torch.tensor([1, 3])
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(crecon_loss(r, t, idx), crecon_loss(r[perm], t[perm], idx))
    with pytest.raises(ValueError):
        crecon_loss(r, t, torch.tensor([], dtype=torch.long))


def test_crecon_decreases_with_positive_similarity():
    t = torch.eye(3, dtype=D)[:, None, :]
    losses = []
    for a in (0.0, 0.5, 1.0, 2.0):
        r = t.clone()
        r[0, 0] = torch.tensor([a, 1.0, 0.0], dtype=D)
        losses.append(float(crecon_loss(r, t, torch.tensor([0]))))
    assert losses == sorted(losses, reverse=True)


def test_unimodal_decoder():
    torch.manual_seed(0)
    dec = UniModalDecoder(8, max_len=40).double()
    one = torch.randn(2, 1, 8, dtype=D)
    _, w = dec(one, 7)
    assert torch.allclose(w, torch.ones_like(w))
    same = torch.randn(1, 1, 8, dtype=D).repeat(1, 4, 1)
    recon, _ = dec(same, 5)
    single, _ = dec(same[:, :1], 5)
    assert torch.allclose(recon, single)
    for length in (5, 40):
        assert unimodal_decode(torch.randn(3, 8, dtype=D), length, dec).shape == (length, 8)


def test_urecon_values():
    v = torch.randn(6, 4, dtype=D)
    assert float(urecon_loss(v, v)) == 0.0
    assert float(urecon_loss(v + 0.3, v)) == pytest.approx(0.09, abs=1e-12)
    with pytest.raises(ValueError):
        urecon_loss(v, v[:5])


def _trace(alpha):
    """A 1 x 1 x 2 trace with ``alpha`` on the first-video frame."""
    return torch.tensor([[[alpha, 1 - alpha]]], dtype=D), torch.tensor([[1.0, 0.0]], dtype=D)


@pytest.mark.parametrize("alpha,label,expected", [
    (0.9, 1, 0.0),
    (0.3, 1, -math.log(0.5)),
    (0.3, 0, -math.log(0.9)),
])
def test_guidance_examples(alpha, label, expected):
    trace, member = _trace(alpha)
    loss = guidance_loss(trace, member, torch.tensor([0]), torch.tensor([label]), 0.2)
    assert float(loss) == pytest.approx(expected, abs=1e-12)


def test_guidance_membership_mismatch():
    with pytest.raises(ValueError):
        guidance_loss(torch.ones(1, 2, 3) / 3, torch.ones(1, 4), torch.tensor([0]), torch.tensor([1]), 0.2)


@settings(max_examples=100, deadline=None)
@given(alpha=st.floats(0, 1), label=st.integers(0, 1), beta=st.floats(0, 0.49))
def test_guidance_non_negative(alpha, label, beta):
    trace, member = _trace(alpha)
    assert float(guidance_loss(trace, member, torch.tensor([0]), torch.tensor([label]), beta)) >= 0


def test_ortho_examples():
    p = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=D)
    assert float(ortho_loss(p)) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    assert float(ortho_loss(torch.eye(4, dtype=D)[:3])) == 0.0
    assert float(ortho_loss(torch.tensor([[1.0, 2.0], [-1.0, -2.0]], dtype=D))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        ortho_loss(torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=D))
    with pytest.raises(ValueError):
        ortho_loss(torch.ones(1, 3, dtype=D))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100))
def test_ortho_row_scale_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    p = torch.randn(4, 6, generator=g, dtype=D)
    q = p.clone()
    q[1] *= scale
    assert torch.allclose(ortho_loss(p), ortho_loss(q), atol=1e-12)


def test_retrieval_margin_satisfied():
    sims = torch.tensor([[1.0, 0.7, 0.8], [0.1, 1.0, 0.0], [0.5, 0.6, 1.0]], dtype=D)
    triplet, _ = retrieval_terms(sims, np.arange(3), margin=0.2)
    assert float(triplet) == 0.0
    only = retrieval_loss(sims, np.arange(3), 0.2, lambda_nce=0.0)
    assert float(only) == float(triplet)


def test_retrieval_relabeling_symmetry():
    torch.manual_seed(2)
    sims = torch.rand(4, 3, dtype=D)
    pairing = np.array([0, 1, 2, 2])
    perm = [1, 0, 2, 3]
    a = retrieval_loss(sims, pairing, 0.2, 0.03)
    b = retrieval_loss(sims[perm], pairing[perm], 0.2, 0.03)
    assert torch.allclose(a, b)


def test_retrieval_needs_two():
    with pytest.raises(ValueError):
        retrieval_loss(torch.ones(1, 1), [0], 0.2, 0.03)


def test_ignore_mask_drops_false_negatives():
    sims = torch.tensor([[0.5, 0.9], [0.0, 0.5]], dtype=D)
    hard, _ = retrieval_terms(sims, np.arange(2), 0.2)
    ignored, _ = retrieval_terms(sims, np.arange(2), 0.2, ignore=np.array([[False, True], [False, False]]))
    assert float(ignored) < float(hard)


def test_total_loss_weighting():
    parts = {k: torch.tensor(v, dtype=D) for k, v in
             dict(ret=1.5, crecon=2.0, urecon=0.5, attn=0.7, ortho=0.1).items()}
    only_ret = default_config().replace(lambda_crecon=0, lambda_urecon=0, lambda_attn=0, lambda_ortho=0)
    assert float(total_loss(parts, only_ret)) == 1.5
    cfg = default_config()
    expected = 1.5 + 0.1 * 2.0 + 1.0 * 0.5 + 0.005 * 0.7 + 0.01 * 0.1
    assert float(total_loss(parts, cfg)) == pytest.approx(expected, abs=1e-12)
    doubled = cfg.replace(**{k: 2 * getattr(cfg, k) for k in
                             ("lambda_ret", "lambda_crecon", "lambda_urecon", "lambda_attn", "lambda_ortho")})
    assert float(total_loss(parts, doubled)) == pytest.approx(2 * expected, abs=1e-12)
    with pytest.raises(NonFiniteLossError):
        total_loss({**parts, "attn": torch.tensor(float("nan"))}, cfg)
