import numpy as np
import pytest

from upt import autograd as ag
from upt.autograd import Tensor
from upt.detections import Detection, filter_and_sample
from upt.gradcheck import gradcheck
from upt.head import (
    MBF,
    VARIANTS,
    AttentionEdit,
    CooperativeLayer,
    EncoderLayer,
    HeadConfig,
    InteractionHead,
    competitive_layer,
    cooperative_layer,
    load_checkpoint,
    mbf,
    mbf_parameter_count,
    save_checkpoint,
)

TOL = 1e-4


def small_cfg(**kw):
    base = dict(m=4, heads=2, branches=2, num_actions=3, ffn_dim=6, pe_hidden=5)
    base.update(kw)
    return HeadConfig(**base)


def tokens_for(rng, n_h, n_o, m):
    dets = []
    for k in range(n_h + n_o):
        box = np.concatenate([rng.uniform(0.3, 0.7, 2), rng.uniform(0.05, 0.3, 2)])
        dets.append(Detection(box, float(rng.uniform(0.3, 1.0)), 0 if k < n_h else 1, rng.normal(size=m)))
    return filter_and_sample(dets, {0}, 0.0, 0, 100)


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def coop_oracle(x, y, layer):
    """Cooperative attention by the per-(i, j) definition, before the residual blocks."""
    n, m = x.shape
    h = layer.heads
    d = m // h
    w = layer.attn_w.data  # (3, h, d)
    out = np.zeros((n, m))
    weights = np.zeros((h, n, n))
    for head in range(h):
        sl = slice(head * d, (head + 1) * d)
        for i in range(n):
            logits = np.array(
                [x[i, sl] @ w[0, head] + x[j, sl] @ w[1, head] + y[i, j, sl] @ w[2, head] + layer.attn_b.data[head]
                 for j in range(n)]
            )
            weights[head, i] = softmax(logits)
            for j in range(n):
                out[i, sl] += weights[head, i, j] * x[j, sl] * y[i, j, sl]
    return out, weights


def post_blocks(x, attended, layer):
    t = Tensor(attended)
    z = layer.norm1(Tensor(x) + layer.out_proj(t))
    return layer.norm2(z + layer.ffn(z)).data


def test_cooperative_layer_matches_definition(rng):
    cfg = small_cfg(m=6, heads=3)
    layer = CooperativeLayer(cfg, rng)
    for _ in range(10):
        n = int(rng.integers(1, 6))
        x = rng.normal(size=(n, 6))
        y = rng.normal(size=(n, n, 6))
        got, w = cooperative_layer(Tensor(x), Tensor(y), layer)
        attended, w_ref = coop_oracle(x, y, layer)
        np.testing.assert_allclose(w, w_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(got.data, post_blocks(x, attended, layer), rtol=0, atol=1e-10)


def test_duplicate_rows_and_pairwise_concat_definitions(rng):
    x = rng.normal(size=(5, 3))
    dup = ag.duplicate_rows(Tensor(x)).data
    pc = ag.pairwise_concat(Tensor(x)).data
    for i in range(5):
        for j in range(5):
            assert np.array_equal(dup[i, j], x[j])
            assert np.array_equal(pc[i, j], np.concatenate([x[i], x[j]]))


def test_attention_rows_sum_to_one(rng):
    layer = CooperativeLayer(small_cfg(), rng)
    enc = EncoderLayer(small_cfg(), rng)
    for n in (1, 2, 7):
        _, w = cooperative_layer(Tensor(rng.normal(size=(n, 4))), Tensor(rng.normal(size=(n, n, 4))), layer)
        assert np.all(np.abs(w.sum(-1) - 1.0) < 1e-9)
        _, w = competitive_layer(Tensor(rng.normal(size=(n, 4))), enc)
        assert np.all(np.abs(w.sum(-1) - 1.0) < 1e-9)


def test_neg_inf_edit_zeroes_weight_and_removes_contribution(rng):
    layer = CooperativeLayer(small_cfg(), rng)
    x = rng.normal(size=(4, 4))
    y = rng.normal(size=(4, 4, 4))
    edits = [AttentionEdit("coop:0", 1, 2, "neg_inf")]
    out, w = cooperative_layer(Tensor(x), Tensor(y), layer, edits)
    assert np.all(w[:, 1, 2] == 0.0)
    assert np.all(np.abs(w.sum(-1) - 1.0) < 1e-9)
    # changing token 2 no longer moves token 1 through attention
    x2 = x.copy()
    x2[2] += 5.0
    y2 = y.copy()
    y2[1, 2] += 3.0
    out2, _ = cooperative_layer(Tensor(x2), Tensor(y2), layer, edits)
    np.testing.assert_allclose(out.data[1], out2.data[1], atol=1e-12)


def test_set_weight_edit_is_not_renormalized(rng):
    layer = CooperativeLayer(small_cfg(), rng)
    x = Tensor(rng.normal(size=(3, 4)))
    y = Tensor(rng.normal(size=(3, 3, 4)))
    _, w = cooperative_layer(x, y, layer, [AttentionEdit("coop:0", 0, 1, "set_weight", 1.0, head=0)])
    assert w[0, 0, 1] == 1.0
    assert w[0, 0].sum() > 1.0
    assert abs(w[1, 0].sum() - 1.0) < 1e-9


def test_cooperative_layer_is_permutation_equivariant(rng):
    layer = CooperativeLayer(small_cfg(), rng)
    n = 5
    x = rng.normal(size=(n, 4))
    y = rng.normal(size=(n, n, 4))
    perm = rng.permutation(n)
    out, w = cooperative_layer(Tensor(x), Tensor(y), layer)
    outp, wp = cooperative_layer(Tensor(x[perm]), Tensor(y[perm][:, perm]), layer)
    np.testing.assert_allclose(outp.data, out.data[perm], atol=1e-12)
    np.testing.assert_allclose(wp, w[:, perm][:, :, perm], atol=1e-12)


def test_mbf_matches_branch_loop(rng):
    m, b = 8, 4
    params = MBF(m, b, rng)
    xx = rng.normal(size=(5, 2 * m))
    y = rng.normal(size=(5, m))
    want = np.zeros((5, m))
    for k in range(b):
        a = xx @ params.w1.data[k] + params.b1.data[k]
        s = y @ params.w2.data[k] + params.b2.data[k]
        want += np.maximum(a * s, 0.0) @ params.w3.data[k]
    want += params.b3.data
    np.testing.assert_allclose(mbf(Tensor(xx), Tensor(y), params).data, want, atol=1e-12)
    np.testing.assert_allclose(mbf(Tensor(xx[0]), Tensor(y[0]), params).data, want[0], atol=1e-12)


def test_mbf_parameter_parity():
    counts = {b: MBF(256, b, np.random.default_rng(0)).num_parameters() for b in (1, 2, 4, 8)}
    assert len(set(counts.values())) == 1
    assert counts[1] == mbf_parameter_count(256, 1) == 4 * 256 * 256 + 3 * 256


def test_mbf_rejects_indivisible_width():
    with pytest.raises(ValueError):
        MBF(10, 4, np.random.default_rng(0))


def _scalar(out, w):
    return (out * w).sum()


def test_cooperative_layer_gradcheck():
    rng = np.random.default_rng(10)
    for _ in range(20):
        layer = CooperativeLayer(small_cfg(), rng)
        n = int(rng.integers(2, 4))
        x = Tensor(rng.normal(size=(n, 4)), requires_grad=True)
        y = Tensor(rng.normal(size=(n, n, 4)), requires_grad=True)
        w = rng.normal(size=(n, 4))
        errs = gradcheck(lambda: _scalar(cooperative_layer(x, y, layer)[0], w), [x, y] + layer.parameters())
        assert max(errs) < TOL, errs


def test_competitive_layer_gradcheck():
    rng = np.random.default_rng(11)
    for _ in range(20):
        layer = EncoderLayer(small_cfg(), rng)
        k = int(rng.integers(2, 5))
        z = Tensor(rng.normal(size=(k, 4)), requires_grad=True)
        w = rng.normal(size=(k, 4))
        errs = gradcheck(lambda: _scalar(competitive_layer(z, layer)[0], w), [z] + layer.parameters())
        assert max(errs) < TOL, errs


def test_mbf_gradcheck():
    rng = np.random.default_rng(12)
    for _ in range(20):
        params = MBF(4, 2, rng)
        xx = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        errs = gradcheck(lambda: _scalar(mbf(xx, y, params), w), [xx, y] + params.parameters())
        assert max(errs) < TOL, errs


@pytest.mark.parametrize("variant", VARIANTS)
def test_full_head_gradcheck(variant):
    rng = np.random.default_rng(13)
    head = InteractionHead(small_cfg(coop_variant=variant, n_coop=1, init_seed=3))
    tokens = tokens_for(rng, 2, 2, 4)
    w = rng.normal(size=(len(tokens.human_indices) * (len(tokens) - 1), 3))
    errs = gradcheck(lambda: _scalar(head(tokens).logits, w), head.parameters())
    assert max(errs) < TOL


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_run_and_report_attention(variant, rng):
    cfg = small_cfg(coop_variant=variant, n_coop=2, n_comp=1)
    head = InteractionHead(cfg)
    tokens = tokens_for(rng, 2, 3, 4)
    out = head(tokens)
    assert out.logits.shape == (2 * 4, 3)
    assert len(out.attn["unary"]) == 2 and out.attn["unary"][0].shape == (2, 5, 5)
    assert len(out.attn["pairwise"]) == 1 and out.attn["pairwise"][0].shape == (2, 8, 8)


def test_no_humans_gives_empty_logits(rng):
    head = InteractionHead(small_cfg())
    out = head(tokens_for(rng, 0, 3, 4))
    assert out.pairs == [] and out.logits.shape == (0, 3)


def test_empty_edit_list_is_identity(rng):
    head = InteractionHead(small_cfg())
    tokens = tokens_for(rng, 2, 2, 4)
    assert np.array_equal(head(tokens).logits.data, head(tokens, []).logits.data)


def test_edit_validation(rng):
    head = InteractionHead(small_cfg(n_coop=1))
    tokens = tokens_for(rng, 1, 2, 4)
    with pytest.raises(IndexError):
        head(tokens, [AttentionEdit("coop:3", 0, 1, "neg_inf")])
    with pytest.raises(IndexError):
        head(tokens, [AttentionEdit("coop:0", 0, 9, "neg_inf")])
    with pytest.raises(ValueError):
        AttentionEdit("coop:0", 0, 1, "zero")
    with pytest.raises(ValueError):
        AttentionEdit("unary", 0, 1, "neg_inf")


def test_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(m=10, heads=4)
    with pytest.raises(ValueError):
        HeadConfig(m=8, heads=2, branches=3)
    with pytest.raises(ValueError):
        HeadConfig(coop_variant="other")


def test_initialization_is_deterministic():
    a = InteractionHead(small_cfg(init_seed=5)).state_dict()
    b = InteractionHead(small_cfg(init_seed=5)).state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    head = InteractionHead(small_cfg(coop_variant="vanilla_add_pe"))
    for p in head.parameters():
        p.data += rng.normal(size=p.shape) * 1e-3
    save_checkpoint(tmp_path / "c.json", head)
    back = load_checkpoint(tmp_path / "c.json")
    assert back.cfg == head.cfg
    tokens = tokens_for(rng, 2, 2, 4)
    assert np.array_equal(back(tokens).logits.data, head(tokens).logits.data)


def test_checkpoint_rejects_bad_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")


def test_feature_width_mismatch(rng):
    head = InteractionHead(small_cfg())
    with pytest.raises(ag.ShapeError):
        head(tokens_for(rng, 1, 1, 5))


def test_mbf_zero_weights_and_dead_branches(rng):
    params = MBF(4, 2, rng)
    xx, y = rng.normal(size=(3, 8)), rng.normal(size=(3, 4))
    for p in params.parameters():
        p.data[...] = 0.0
    assert np.array_equal(mbf(Tensor(xx), Tensor(y), params).data, np.zeros((3, 4)))
    params = MBF(4, 2, rng)
    # a negative constant on one factor and a positive one on the other kills every unit
    params.w1.data[...] = 0.0
    params.b1.data[...] = -1.0
    params.w2.data[...] = 0.0
    params.b2.data[...] = 1.0
    out = mbf(Tensor(xx), Tensor(y), params).data
    np.testing.assert_array_equal(out, np.broadcast_to(params.b3.data, (3, 4)))


def test_cooperative_layer_single_token(rng):
    layer = CooperativeLayer(small_cfg(), rng)
    x = rng.normal(size=(1, 4))
    y = rng.normal(size=(1, 1, 4))
    out, w = cooperative_layer(Tensor(x), Tensor(y), layer)
    assert np.array_equal(w, np.ones((2, 1, 1)))
    np.testing.assert_allclose(out.data, post_blocks(x, x * y[0], layer), atol=1e-12)


def test_competitive_layer_single_token(rng):
    enc = EncoderLayer(small_cfg(), rng)
    out, w = competitive_layer(Tensor(rng.normal(size=(1, 4))), enc)
    assert out.shape == (1, 4) and np.array_equal(w, np.ones((2, 1, 1)))


def test_forward_is_deterministic(rng):
    head = InteractionHead(small_cfg(n_coop=2, n_comp=1))
    tokens = tokens_for(rng, 2, 3, 4)
    a, b = head(tokens), head(tokens)
    assert np.array_equal(a.logits.data, b.logits.data)
    for kind in ("unary", "pairwise"):
        assert all(np.array_equal(u, v) for u, v in zip(a.attn[kind], b.attn[kind]))


def test_forward_and_backward_are_finite_on_wide_inputs():
    rng = np.random.default_rng(21)
    for _ in range(10):
        head = InteractionHead(small_cfg(n_coop=2, n_comp=1, init_seed=int(rng.integers(1000))))
        for p in head.parameters():
            p.data[...] = rng.uniform(-3, 3, size=p.shape)
        dets = [
            Detection(
                np.concatenate([rng.uniform(0.1, 0.9, 2), rng.uniform(0.01, 0.5, 2)]),
                float(rng.uniform(0.3, 1.0)),
                0 if k < 2 else 1,
                rng.uniform(-3, 3, size=4),
            )
            for k in range(5)
        ]
        tokens = filter_and_sample(dets, {0}, 0.0, 0, 100)
        loss = head(tokens).logits.sum()
        loss.backward()
        assert np.isfinite(loss.item())
        assert all(np.all(np.isfinite(p.grad)) for p in head.parameters())


def test_neg_inf_edge_gets_no_gradient(rng):
    layer = CooperativeLayer(small_cfg(), rng)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
    edits = [AttentionEdit("coop:0", 0, 2, "neg_inf")]
    w = rng.normal(size=(3, 4))
    # only row 0 of the output is read, so y[0, 2] can reach it through the cut edge alone
    _scalar(cooperative_layer(x, y, layer, edits)[0][0], w[0]).backward()
    assert np.all(y.grad[0, 2] == 0.0)
    assert np.any(y.grad[0, 1] != 0.0)
