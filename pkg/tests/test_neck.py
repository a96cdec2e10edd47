import numpy as np
import pytest

from konvlina.attention import AttentionConfig
from konvlina.core import Parameter, Tape, backward, check_gradients, make_rng, ops
from konvlina.core.gradcheck import analytic_grad
from konvlina.core.tensor import ConfigurationError, DimensionError
from konvlina.kan import PhiEdge, kan_conv2d
from konvlina.neck import (
    CKSPP,
    ENAU,
    FeaturePyramid,
    Neck,
    NeckConfig,
    ckspp_forward,
    enau_forward,
    fuse_add,
    neck_forward,
)


def small_attention(c_red=8, m=4, r=2, iters=12):
    return AttentionConfig(heads=2, head_dim=c_red // 2, landmarks=m, registers=r, max_len=512,
                           pinv_iterations=iters, pinv_warn_tol=1.0)


def pyramid(rng, base, channels=(4, 6, 8), batch=()):
    return FeaturePyramid(tuple(rng.normal(size=(*batch, c, base // 2**i, base // 2**i))
                                for i, c in enumerate(channels)))


# ---------------------------------------------------------------- cKSPP

def test_ckspp_constant_input_gives_constant_output():
    block = CKSPP(3, 5, rng=make_rng(1))
    y = ckspp_forward(np.full((3, 8, 8), 0.4), block).data
    assert np.ptp(y, axis=(1, 2)).max() < 1e-12


def test_ckspp_identity_pooling_branch():
    rng = make_rng(2)
    block = CKSPP(3, 4, scales=(6,), rng=rng)
    X = rng.normal(size=(3, 6, 6))
    # Fusion conv that exposes only the pooled branch.
    w = np.zeros(block.fuse.weight.shape)
    w[np.arange(4), np.arange(4), 0, 0] = 1.0
    block.fuse.weight.assign(w)
    np.testing.assert_allclose(block(X).data, kan_conv2d(X, block.branches[0]).data, atol=1e-12)


def test_ckspp_identity_passthrough_recovers_input():
    rng = make_rng(3)
    block = CKSPP(4, 4, scales=(1, 2, 3, 6), rng=rng)
    for kernel in block.branches:
        kernel.fill(PhiEdge.identity())
    block.identity_passthrough()
    X = rng.normal(size=(4, 8, 8))
    np.testing.assert_allclose(block(X).data, X, atol=1e-6)


def test_ckspp_channel_mismatch():
    with pytest.raises(ConfigurationError):
        CKSPP(3, 4)(np.zeros((2, 4, 4)))


def test_ckspp_handles_maps_smaller_than_scales():
    assert CKSPP(2, 3, rng=make_rng(4))(make_rng(5).normal(size=(2, 2, 3))).shape == (3, 2, 3)


def test_ckspp_gradients():
    rng = make_rng(6)
    block = CKSPP(2, 2, scales=(1, 2), rng=rng)
    X = Parameter(rng.normal(size=(2, 4, 4)))
    w = rng.normal(size=(2, 4, 4))
    errs = check_gradients(lambda: ops.sum(ops.mul(block(X), w)), [X, *block.parameters()])
    assert max(errs) < 1e-4


# ---------------------------------------------------------------- eNAU

@pytest.mark.parametrize("c_out", [1, 5, 16])
def test_enau_shape_contract(c_out):
    block = ENAU(8, 8, c_out, small_attention(), rng=make_rng(7))
    assert block(make_rng(8).normal(size=(8, 4, 4))).shape == (c_out, 8, 8)


@pytest.mark.parametrize("hw", [(2, 2), (4, 4), (8, 8), (4, 8)])
def test_enau_output_positions(hw):
    H, W = hw
    block = ENAU(6, 8, 3, small_attention(m=4, r=4), rng=make_rng(9))
    y = block(make_rng(10).normal(size=(6, H, W)))
    assert y.shape == (3, 2 * H, 2 * W) and y.size // 3 == 4 * H * W


def test_enau_zero_input_gives_deconv_of_value_bias():
    rng = make_rng(11)
    block = ENAU(4, 8, 3, small_attention(), rng=rng)
    block.attn.rel_pos.p_rel.assign(np.zeros(block.attn.rel_pos.p_rel.shape))
    block.attn.registers.tokens.assign(np.zeros(block.attn.registers.tokens.shape))
    block.attn.v.bias.assign(rng.normal(size=8))
    block.attn.q.bias.assign(rng.normal(size=8))
    block.up.bias.assign(rng.normal(size=3))
    y = enau_forward(np.zeros((4, 4, 4)), block).data
    value_map = np.broadcast_to(block.attn.v.bias.data[:, None, None], (8, 4, 4))
    expected = ops.deconv2d(value_map, block.up.weight, block.up.bias).data
    np.testing.assert_allclose(y, expected, atol=1e-10)


def test_enau_rejects_excess_landmarks():
    block = ENAU(4, 8, 4, small_attention(m=10, r=2))
    with pytest.raises(ConfigurationError, match="L=4.*r=2.*m=10|m=10.*L=4.*r=2"):
        block(np.zeros((4, 2, 2)))


def test_enau_gradients_reach_every_group():
    rng = make_rng(12)
    block = ENAU(3, 4, 2, small_attention(c_red=4, m=3, r=2, iters=6), rng=rng)
    X = rng.normal(size=(3, 2, 3))
    w = rng.normal(size=(2, 4, 6))
    params = block.parameters()
    f = lambda: ops.sum(ops.mul(block(X), w))  # noqa: E731
    names = [n for n, _ in block.named_parameters()]
    grads = analytic_grad(f, params)
    for name, g in zip(names, grads):
        assert np.any(g != 0), name
    assert max(check_gradients(f, params)) < 1e-4


# ---------------------------------------------------------------- fusion and neck

def test_fuse_add():
    rng = make_rng(13)
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    np.testing.assert_array_equal(fuse_add(a, np.zeros_like(a)).data, a)
    np.testing.assert_array_equal(fuse_add(a, b).data, fuse_add(b, a).data)
    np.testing.assert_array_equal(fuse_add(a, b).data, a + b)
    with pytest.raises(DimensionError, match=r"\(2, 3, 3\).*\(2, 3, 4\)"):
        fuse_add(a, np.zeros((2, 3, 4)))


def test_pyramid_invariants():
    with pytest.raises(DimensionError):
        FeaturePyramid((np.zeros((1, 8, 8)), np.zeros((1, 4, 4)), np.zeros((1, 3, 3))))
    with pytest.raises(DimensionError):
        FeaturePyramid((np.zeros((1, 8, 8)), np.zeros((1, 4, 4))))


def neck_cfg(upsample="enau", ckspp=True, c_out=8):
    return NeckConfig(c_out=c_out, c_red=8, scales=(1, 2, 3), upsample=upsample, use_ckspp=ckspp,
                      attention=small_attention(m=4, r=2))


@pytest.mark.parametrize("base", [16, 32])
@pytest.mark.parametrize("mode", [("enau", True), ("enau", False), ("nearest", False), ("nearest", True)])
def test_neck_shape_contract(base, mode):
    rng = make_rng(14)
    pyr = pyramid(rng, base)
    neck = Neck((4, 6, 8), neck_cfg(*mode), rng=rng)
    out = neck_forward(pyr, neck)
    for fin, fout in zip(pyr, out):
        assert fout.shape == (8, *fin.shape[-2:])


@pytest.mark.parametrize("H", [4, 8, 16])
@pytest.mark.parametrize("W", [4, 8, 16])
def test_neck_shapes_over_grid(H, W):
    rng = make_rng(15)
    pyr = FeaturePyramid((rng.normal(size=(3, H, W)), rng.normal(size=(3, H // 2, W // 2)),
                          rng.normal(size=(3, H // 4, W // 4))))
    cfg = NeckConfig(c_out=8, c_red=8, scales=(1, 2), attention=small_attention(m=1, r=2))
    out = Neck((3, 3, 3), cfg, rng=rng)(pyr)
    assert [t.shape for t in out] == [(8, H, W), (8, H // 2, W // 2), (8, H // 4, W // 4)]


def test_nearest_ablation_has_no_attention_parameters():
    rng = make_rng(16)
    near = Neck((4, 6, 8), neck_cfg("nearest", False), rng=rng)
    enau = Neck((4, 6, 8), neck_cfg("enau", False), rng=rng)
    assert not any(".attn." in n or n.startswith("up.") for n, _ in near.named_parameters())
    assert any(".attn." in n for n, _ in enau.named_parameters())
    lateral = sum(p.size for n, p in near.named_parameters() if n.startswith("lateral."))
    assert near.num_parameters() == lateral


def test_neck_batched_matches_per_sample():
    rng = make_rng(17)
    pyr = pyramid(rng, 8, batch=(2,))
    neck = Neck((4, 6, 8), neck_cfg(), rng=rng)
    out = neck(pyr)
    for b in range(2):
        single = neck(FeaturePyramid(tuple(t.data[b] for t in pyr)))
        for x, y in zip(out, single):
            np.testing.assert_allclose(x.data[b], y.data, atol=1e-10)


def test_neck_end_to_end_gradients():
    rng = make_rng(18)
    pyr = pyramid(rng, 8, channels=(2, 2, 2))
    cfg = NeckConfig(c_out=4, c_red=4, scales=(1, 2),
                     attention=AttentionConfig(heads=2, head_dim=2, landmarks=2, registers=2, max_len=64,
                                               pinv_iterations=6, pinv_warn_tol=1.0))
    neck = Neck((2, 2, 2), cfg, rng=rng)
    weights = [rng.normal(size=(4, *t.shape[-2:])) for t in pyr]

    def f():
        out = neck(pyr)
        total = ops.sum(ops.mul(out[0], weights[0]))
        for t, w in zip(out.levels[1:], weights[1:]):
            total = ops.add(total, ops.sum(ops.mul(t, w)))
        return total

    errs = check_gradients(f, neck.parameters())
    assert max(errs) < 1e-4


def test_neck_forward_backward_deterministic():
    def run():
        rng = make_rng(19)
        pyr = pyramid(rng, 8)
        neck = Neck((4, 6, 8), neck_cfg(), rng=rng)
        with Tape() as tape:
            out = neck(pyr)
            loss = ops.sum(ops.mul(out[0], out[0]))
        grads = backward(tape, loss)
        return out[0].data.tobytes(), [grads[p.id].tobytes() for p in neck.parameters()]

    assert run() == run()
