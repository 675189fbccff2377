import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caidd.attention import GAZE, IDENTITY, PARSING, ConcatProj, ConditionTokens, CrossAttention, concat_project, cross_attention
from caidd.errors import ConfigError, DimensionError, NumericError
from caidd.experts import ConditionBundle


def _bundle(b=2, d_id=128, d_parse=64, n=5, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    e_id = torch.randn(b, d_id, generator=g, dtype=dtype)
    gz = torch.randn(b, 3, generator=g, dtype=dtype)
    masks = torch.softmax(torch.randn(b, n, 8, 8, generator=g, dtype=dtype), 1)
    return ConditionBundle(e_id / e_id.norm(dim=1, keepdim=True), torch.randn(b, n, d_parse, generator=g, dtype=dtype), masks, gz / gz.norm(dim=1, keepdim=True))


def _block(channels=16, d_model=32, heads=4, seed=0):
    torch.manual_seed(seed)
    return CrossAttention(channels, d_model, heads).double()


def test_token_layout_and_count():
    proj = ConcatProj(128, 64, 32).double()
    tok = concat_project(_bundle(), proj)
    assert tok.tokens.shape == (2, 7, 32)
    assert tok.modality_tags == (IDENTITY,) + (PARSING,) * 5 + (GAZE,)


def test_zero_bundle_zero_bias_gives_zero_tokens():
    proj = ConcatProj(128, 64, 32).double()
    for lin in (proj.id_proj, proj.parse_proj, proj.gaze_proj):
        torch.nn.init.zeros_(lin.bias)
    b = _bundle()
    zero = ConditionBundle(*(torch.zeros_like(t) for t in b.tensors()))
    assert torch.count_nonzero(proj(zero).tokens) == 0


def test_scaling_identity_only_moves_identity_token():
    proj = ConcatProj(128, 64, 32).double()
    b = _bundle()
    b2 = ConditionBundle(2 * b.e_id, b.e_parse, b.region_masks, b.e_gaze)
    t1, t2 = proj(b).tokens, proj(b2).tokens
    bias = proj.id_proj.bias
    torch.testing.assert_close(t2[:, 0] - bias, 2 * (t1[:, 0] - bias))
    assert torch.equal(t1[:, 1:], t2[:, 1:])


def test_width_mismatch_names_modality():
    proj = ConcatProj(128, 64, 32)
    b = _bundle(d_parse=60, dtype=torch.float32)
    with pytest.raises(ConfigError, match="parsing"):
        proj(b)


def test_row_stochastic_weights():
    blk = _block()
    g = torch.Generator().manual_seed(1)
    feat = torch.randn(2, 16, 6, 5, generator=g, dtype=torch.float64)
    tok = ConditionTokens(torch.randn(2, 7, 32, generator=g, dtype=torch.float64), ("x",) * 7)
    out, w = blk(feat, tok, return_weights=True)
    assert out.shape == feat.shape
    assert w.shape == (2, 4, 30, 7)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 4, 30, dtype=torch.float64), rtol=0, atol=1e-6)


def test_single_token_degenerate_case():
    blk = _block()
    g = torch.Generator().manual_seed(2)
    feat = torch.randn(1, 16, 4, 4, generator=g, dtype=torch.float64)
    tok = torch.randn(1, 1, 32, generator=g, dtype=torch.float64)
    out, w = blk(feat, ConditionTokens(tok, (IDENTITY,)), return_weights=True)
    assert torch.equal(w, torch.ones_like(w))
    # pre-residual output is W_o W_v token at every position
    expect = blk.W_o(blk.W_v(tok[0, 0]))
    delta = (out - feat)[0].reshape(16, -1).T
    torch.testing.assert_close(delta, expect.expand(16, -1), rtol=1e-12, atol=1e-12)


def test_identical_tokens_match_single_token():
    blk = _block()
    g = torch.Generator().manual_seed(3)
    feat = torch.randn(1, 16, 4, 4, generator=g, dtype=torch.float64)
    tok = torch.randn(1, 1, 32, generator=g, dtype=torch.float64)
    one = blk(feat, ConditionTokens(tok, ("a",)))
    many = blk(feat, ConditionTokens(tok.expand(1, 5, 32).contiguous(), ("a",) * 5))
    torch.testing.assert_close(one, many, rtol=1e-12, atol=1e-12)


def test_zero_output_projection_is_identity():
    blk = _block()
    torch.nn.init.zeros_(blk.W_o.weight)
    g = torch.Generator().manual_seed(4)
    feat = torch.randn(2, 16, 4, 4, generator=g, dtype=torch.float64)
    tok = ConditionTokens(torch.randn(2, 7, 32, generator=g, dtype=torch.float64), ("x",) * 7)
    assert torch.equal(blk(feat, tok), feat)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(7))), st.integers(0, 10_000))
def test_token_permutation_invariance(perm, seed):
    blk = _block(seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    feat = torch.randn(2, 16, 4, 3, generator=g, dtype=torch.float64)
    tags = (IDENTITY,) + (PARSING,) * 5 + (GAZE,)
    tok = ConditionTokens(torch.randn(2, 7, 32, generator=g, dtype=torch.float64), tags)
    with torch.no_grad():
        a = blk(feat, tok)
        b = blk(feat, tok.permute(perm))
    assert float((a - b).abs().max()) < 1e-6


def test_errors():
    blk = _block()
    feat = torch.zeros(1, 16, 4, 4, dtype=torch.float64)
    with pytest.raises(DimensionError):
        blk(torch.zeros(1, 8, 4, 4, dtype=torch.float64), ConditionTokens(torch.zeros(1, 2, 32, dtype=torch.float64), ("a", "b")))
    with pytest.raises(DimensionError):
        blk(feat, ConditionTokens(torch.zeros(1, 2, 31, dtype=torch.float64), ("a", "b")))
    bad = torch.zeros(1, 2, 32, dtype=torch.float64)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        blk(feat, ConditionTokens(bad, ("a", "b")))
    with pytest.raises(ConfigError):
        CrossAttention(16, 30, 4)


def test_functional_single_map():
    blk = _block()
    g = torch.Generator().manual_seed(5)
    feat = torch.randn(16, 4, 4, generator=g, dtype=torch.float64)
    tok = ConditionTokens(torch.randn(3, 32, generator=g, dtype=torch.float64), ("a",) * 3)
    out, w = cross_attention(feat, tok, blk, return_weights=True)
    assert out.shape == feat.shape and w.shape == (4, 16, 3)


def test_select_filters_modalities():
    tags = (IDENTITY,) + (PARSING,) * 5 + (GAZE,)
    tok = ConditionTokens(torch.arange(7.0).reshape(1, 7, 1), tags)
    sub = tok.select((PARSING, GAZE))
    assert sub.modality_tags == (PARSING,) * 5 + (GAZE,)
    assert sub.tokens.reshape(-1).tolist() == [1, 2, 3, 4, 5, 6]


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def test_gradients_match_finite_differences():
    blk = _block(channels=8, d_model=16, heads=2, seed=9)
    g = torch.Generator().manual_seed(9)
    feat = torch.randn(1, 8, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    tok = ConditionTokens(torch.randn(1, 4, 16, generator=g, dtype=torch.float64), ("a",) * 4)
    target = torch.randn(1, 8, 3, 3, generator=g, dtype=torch.float64)

    def loss():
        return ((blk(feat, tok) - target) ** 2).sum()

    params = [feat, blk.W_q.weight, blk.W_k.weight, blk.W_v.weight, blk.W_o.weight]
    grads = torch.autograd.grad(loss(), params)
    rng = np.random.default_rng(0)
    h = 1e-6
    for p, gr in zip(params, grads):
        for i in rng.choice(p.numel(), 4, replace=False):
            flat = p.data.view(-1)
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + h
                lp = float(loss())
                flat[i] = old - h
                lm = float(loss())
                flat[i] = old
            fd = (lp - lm) / (2 * h)
            assert _rel(fd, float(gr.view(-1)[i])) < 1e-4
