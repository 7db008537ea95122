import numpy as np
import pytest

from rfnet import fusion as F
from rfnet.params import named_tensors
from rfnet.tensor import ShapeError, Tensor
from rfnet.tensor.init import make_rng


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def zero_params(obj):
    for _, t in named_tensors(obj):
        t.data[...] = 0.0
    return obj


def np_conv_same(x, w, b, dil):
    """Zero-padded same-size cross-correlation of C x H x W with K x C x 3 x 3."""
    C, H, W = x.shape
    pad = dil
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    out = np.zeros((w.shape[0], H, W)) + b[:, None, None]
    for u in range(3):
        for v in range(3):
            patch = xp[:, u * dil:u * dil + H, v * dil:v * dil + W]
            out += np.einsum("kc,chw->khw", w[:, :, u, v], patch)
    return out


def np_ca(f, p):
    def mlp(v):
        h = np.maximum(p.hidden.weight.data @ v + p.hidden.bias.data, 0)
        return p.out.weight.data @ h + p.out.bias.data
    return sig(mlp(f.mean(axis=(1, 2))) + mlp(f.max(axis=(1, 2))))[:, None, None]


def np_norm_max(a, b):
    m = np.maximum(a, b)
    return (m - m.min()) / (m.max() - m.min() + 1e-8)


# -- LWA --------------------------------------------------------------------------

def test_lwa_matches_numpy_oracle(rng):
    p = F.LwaParams.init(make_rng(0), 4, dtype=np.float64)
    R, D = rng.standard_normal((4, 6, 6)), rng.standard_normal((4, 6, 6))
    r = np.einsum("kc,chw->khw", p.proj_r.kernel.data[:, :, 0, 0], R).reshape(4, -1) + p.proj_r.bias.data[:, None]
    d = np.einsum("kc,chw->khw", p.proj_d.kernel.data[:, :, 0, 0], D).reshape(4, -1) + p.proj_d.bias.data[:, None]
    logits = r @ d.T / 2.0
    S = np.exp(logits - logits.max(1, keepdims=True))
    S /= S.sum(1, keepdims=True)
    A = S @ (r + d) + (r + d)
    h = np.maximum(p.mlp_hidden.weight.data @ A.mean(1) + p.mlp_hidden.bias.data, 0)
    lam = sig(p.mlp_out.weight.data @ h + p.mlp_out.bias.data)
    np.testing.assert_allclose(F.lwa_forward(t64(R), t64(D), p).data, lam, rtol=1e-12)


def test_lwa_zero_mlp_gives_half():
    p = F.LwaParams.init(make_rng(0), 4, dtype=np.float64)
    p.mlp_out.weight.data[...] = 0.0
    p.mlp_out.bias.data[...] = 0.0
    lam = F.lwa_forward(t64(np.ones((4, 3, 3))), t64(np.ones((4, 3, 3))), p).data
    np.testing.assert_array_equal(lam, [0.5] * 5)


def test_lwa_similarity_symmetric_for_equal_inputs(rng):
    p = F.LwaParams.init(make_rng(1), 6, dtype=np.float64)
    p.proj_d = p.proj_r
    x = t64(rng.standard_normal((6, 5, 5)))
    sim, _ = F.lwa_similarity(x, x, p)
    # row softmax subtracts a per-row constant c_i from the logits, so for a
    # symmetric product K = log S - log S^T satisfies K_ij = c_j - c_i = K_i0 + K_0j
    L = np.log(sim.data)
    K = L - L.T
    np.testing.assert_allclose(K, K[:, :1] + K[:1, :], atol=1e-6)


def test_lwa_rejects_mismatched_inputs():
    p = F.LwaParams.init(make_rng(0), 4)
    with pytest.raises(ShapeError):
        F.lwa_forward(Tensor(np.ones((4, 4, 4))), Tensor(np.ones((4, 2, 2))), p)


# -- spatial attention --------------------------------------------------------------

def test_vanilla_sa_zero_weights_is_half(rng):
    p = zero_params(F.SaParams.init(make_rng(0), dtype=np.float64))
    out = F.vanilla_sa(t64(rng.standard_normal((5, 6, 7))), p).data
    assert out.shape == (1, 6, 7)
    np.testing.assert_array_equal(out, 0.5)


def test_vanilla_sa_shift_equivariant_in_interior(rng):
    p = F.SaParams.init(make_rng(3), dtype=np.float64)
    f = np.zeros((3, 20, 20))
    f[:, 6:12, 6:12] = rng.standard_normal((3, 6, 6))
    g = np.roll(f, (2, 3), axis=(1, 2))
    a = F.vanilla_sa(t64(f), p).data
    b = F.vanilla_sa(t64(g), p).data
    np.testing.assert_allclose(b[:, 5:15, 6:16], a[:, 3:13, 3:13], atol=1e-12)


def test_tsa_matches_numpy_oracle(rng):
    p = F.TsaParams.init(make_rng(2), dtype=np.float64)
    f = rng.standard_normal((4, 9, 8))
    pooled = np.stack([f.mean(0), f.max(0)])
    branches = [np_conv_same(pooled, c.kernel.data, c.bias.data, d) for c, d in zip(p.branch, F.TSA_DILATIONS)]
    fused = np.einsum("c,chw->hw", p.fuse.kernel.data[0, :, 0, 0], np.concatenate(branches)) + p.fuse.bias.data[0]
    np.testing.assert_allclose(F.tsa_forward(t64(f), p).data[0], sig(fused), rtol=1e-12)


def test_tsa_zero_fuse_is_half(rng):
    p = F.TsaParams.init(make_rng(2), dtype=np.float64)
    p.fuse.kernel.data[...] = 0
    out = F.tsa_forward(t64(rng.standard_normal((3, 5, 5))), p).data
    np.testing.assert_array_equal(out, 0.5)


def test_tsa_sees_further_than_vanilla_sa():
    p = F.TsaParams.init(make_rng(4), dtype=np.float64)
    sa = F.SaParams.init(make_rng(4), dtype=np.float64)
    base = np.zeros((2, 21, 21))
    poked = base.copy()
    poked[:, 10, 15] = 3.0           # five steps right of the centre
    dt = F.tsa_logits(t64(poked), p).data[0, 10, 10] - F.tsa_logits(t64(base), p).data[0, 10, 10]
    ds = F.vanilla_sa(t64(poked), sa).data[0, 10, 10] - F.vanilla_sa(t64(base), sa).data[0, 10, 10]
    assert abs(dt) > 1e-6
    assert ds == 0.0


def test_tsa_reduces_to_k3_vanilla_sa(rng):
    p = F.TsaParams.init(make_rng(5), dtype=np.float64)
    for c in p.branch[1:]:
        c.kernel.data[...] = 0.0
        c.bias.data[...] = 0.0
    p.fuse.kernel.data[...] = 0.0
    p.fuse.kernel.data[0, 0, 0, 0] = 1.0
    p.fuse.bias.data[...] = 0.0
    sa = F.SaParams(conv=p.branch[0])
    f = t64(rng.standard_normal((6, 8, 8)))
    assert np.max(np.abs(F.tsa_forward(f, p).data - F.vanilla_sa(f, sa).data)) <= 1e-6


# -- channel attention and fusion ---------------------------------------------------

def test_channel_attention_oracle_and_shape(rng):
    p = F.CaParams.init(make_rng(6), 8, dtype=np.float64)
    f = rng.standard_normal((8, 5, 4))
    out = F.channel_attention(t64(f), p).data
    assert out.shape == (8, 1, 1)
    np.testing.assert_allclose(out, np_ca(f, p), rtol=1e-12)


def test_channel_attention_zero_mlp_is_half(rng):
    p = zero_params(F.CaParams.init(make_rng(6), 8, dtype=np.float64))
    np.testing.assert_array_equal(F.channel_attention(t64(rng.standard_normal((8, 3, 3))), p).data, 0.5)


def test_channel_attention_monotone_probe(rng):
    C = 4
    p = F.CaParams.init(make_rng(0), C, reduction=1, dtype=np.float64)
    p.hidden.weight.data[...] = np.eye(C)
    p.out.weight.data[...] = np.eye(C)
    for _ in range(20):
        f = rng.random((C, 4, 4))
        before = F.channel_attention(t64(f), p).data[1, 0, 0]
        f[1] *= 1.5
        assert F.channel_attention(t64(f), p).data[1, 0, 0] >= before


def test_shared_fuse_examples():
    out = F.shared_fuse(t64([0.2, 0.8]), t64([0.6, 0.4])).data
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-7)
    const = F.shared_fuse(t64(np.full((3, 1, 1), 0.4)), t64(np.full((3, 1, 1), 0.4))).data
    np.testing.assert_array_equal(const, 0.0)


def _fusion_setup(rng, C=4, H=6, attention="ca+tsa"):
    stage = F.FusionStageParams.init(make_rng(7), C, C, attention, learn_ab=True, dtype=np.float64)
    for _, t in named_tensors(stage):
        t.data += 0.1 * rng.standard_normal(t.shape)
    return stage, t64(rng.standard_normal((C, H, H))), t64(rng.standard_normal((C, H, H)))


def test_qcrm_ca_oracle_and_lambda_zero(rng):
    stage, R, D = _fusion_setup(rng)
    ar, ad = np_ca(R.data, stage.ca_r), np_ca(D.data, stage.ca_d)
    af = np_norm_max(ar, ad)
    for lam in (0.0, 0.3, 1.0):
        out = F.qcrm_ca(R, D, lam, stage.ca_r, stage.ca_d).data
        np.testing.assert_allclose(out, af * ar * R.data + lam * af * ad * D.data, rtol=1e-12, atol=1e-14)
    zero = F.qcrm_ca(R, D, 0.0, stage.ca_r, stage.ca_d).data
    no_depth = (F.shared_fuse(F.channel_attention(R, stage.ca_r), F.channel_attention(D, stage.ca_d))
                * F.channel_attention(R, stage.ca_r) * R).data
    assert np.array_equal(zero, no_depth)


def test_qcrm_ca_linear_in_lambda(rng):
    stage, R, D = _fusion_setup(rng)
    base = F.qcrm_ca(R, D, 0.0, stage.ca_r, stage.ca_d).data
    one = F.qcrm_ca(R, D, 0.25, stage.ca_r, stage.ca_d).data - base
    two = F.qcrm_ca(R, D, 0.5, stage.ca_r, stage.ca_d).data - base
    np.testing.assert_allclose(two, 2 * one, rtol=1e-12, atol=1e-15)


def test_af_reduces_to_additive_crm(rng):
    stage, R, D = _fusion_setup(rng)
    stage.alpha.data[...] = 1.0
    stage.beta.data[...] = 0.0
    ar, ad = np_ca(R.data, stage.ca_r), np_ca(D.data, stage.ca_d)
    af = np_norm_max(ar, ad)
    additive = af * ar * R.data + af * ad * D.data
    assert np.max(np.abs(F.af_fuse(R, D, 1.0, stage).data - additive)) <= 1e-6
    crm = F.crm_concat(R, D, stage.ca_r, stage.ca_d).data
    np.testing.assert_allclose(crm[:4] + crm[4:], additive, rtol=1e-12)


def test_af_zero_weights_is_zero(rng):
    stage, R, D = _fusion_setup(rng)
    stage.alpha.data[...] = 0.0
    stage.beta.data[...] = 0.0
    np.testing.assert_array_equal(F.af_fuse(R, D, 0.7, stage).data, 0.0)


def test_af_baseline_is_weighted_sum(rng):
    stage, R, D = _fusion_setup(rng, attention="none")
    np.testing.assert_allclose(F.af_fuse(R, D, 0.3, stage).data, R.data + 0.3 * D.data)


def test_af_alpha_gradient_is_inner_product(rng):
    stage, R, D = _fusion_setup(rng)
    G = rng.standard_normal(R.shape)
    out = F.af_fuse(R, D, 0.6, stage)
    (out * t64(G)).sum().backward()
    q = F.qcrm_ca(R, D, 0.6, stage.ca_r, stage.ca_d).data
    assert stage.alpha.grad[0] == pytest.approx(float((G * q).sum()), rel=1e-10)


def test_af_cross_level_merge_shapes(rng):
    stage, R, D = _fusion_setup(rng, C=4, H=4)
    prev = t64(rng.standard_normal((4, 8, 8)))
    assert F.af_fuse(R, D, 0.5, stage, prev).shape == (4, 4, 4)
    with pytest.raises(ShapeError):
        F.af_fuse(R, D, 0.5, stage, t64(rng.standard_normal((4, 6, 6))))


def test_af_rejects_mismatched_streams(rng):
    stage, R, _ = _fusion_setup(rng)
    with pytest.raises(ShapeError):
        F.af_fuse(R, t64(np.ones((4, 3, 3))), 1.0, stage)


def test_stage_parameter_names():
    stage = F.FusionStageParams.init(make_rng(0), 8, 4, "ca+tsa")
    names = [n for n, _ in named_tensors(stage, "fusion.stage3")]
    assert "fusion.stage3.tsa_r.branch2.kernel" in names
    assert "fusion.stage3.merge.kernel" in names
