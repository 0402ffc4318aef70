import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claps import tensor as T
from claps.affm import (AffmParams, AttnParams, FapBranch, GateParams, affm_forward, attention,
                        cross_attention_fuse, fap_forward, gate, to_tokens)
from claps.losses import dice_loss
from claps.tensor import Tensor, grad_check

from .oracles import conv2d_loops


def identity_branch(d):
    delta = np.zeros((d, d, 3, 3))
    for c in range(d):
        delta[c, c, 1, 1] = 1.0
    z = np.zeros(d)
    return FapBranch(conv1_w=Tensor(delta), conv1_b=Tensor(z), conv2_w=Tensor(delta.copy()),
                     conv2_b=Tensor(z), proj_w=Tensor(np.eye(d).reshape(d, d, 1, 1)), proj_b=Tensor(z))


def zero_kv_bias(p: AttnParams):
    p.b_k.data[:] = 0.0
    p.b_v.data[:] = 0.0
    return p


class TestFap:
    def test_zero_input_zero_bias_gives_zero(self, rng):
        br = FapBranch.init(rng, 3, 5)
        for b in (br.conv1_b, br.conv2_b, br.proj_b):
            b.data[:] = 0.0
        out = fap_forward(np.zeros((2, 3, 4, 4)), br)
        assert out.shape == (2, 5, 4, 4)
        assert not out.data.any()

    def test_identity_configuration(self, rng):
        x = rng.uniform(0, 1, (1, 4, 5, 6))
        np.testing.assert_array_equal(fap_forward(x, identity_branch(4)).data, x)

    def test_matches_loop_composition(self, rng):
        br = FapBranch.init(rng, 2, 3, hidden=4)
        x = rng.normal(size=(2, 2, 5, 4))
        h = np.maximum(conv2d_loops(x, br.conv1_w.data, br.conv1_b.data), 0)
        h = conv2d_loops(h, br.conv2_w.data, br.conv2_b.data)
        ref = conv2d_loops(h, br.proj_w.data, br.proj_b.data)
        np.testing.assert_allclose(fap_forward(x, br).data, ref, atol=1e-10)

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="expects"):
            fap_forward(np.zeros((1, 2, 4, 4)), FapBranch.init(rng, 3, 4))


class TestGate:
    def test_zero_weights_halve(self, rng):
        x = rng.normal(size=(1, 4, 3, 3))
        g = GateParams(w_gate=Tensor(np.zeros(4)))
        np.testing.assert_allclose(gate(x, g).data, 0.5 * x)

    def test_large_negative_weight_kills_channel(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        g = GateParams(w_gate=Tensor(np.array([0.0, -30.0, 1.0])))
        out = gate(x, g).data
        assert np.abs(out[:, 1]).max() < 1e-12 * np.abs(x).max()

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_never_changes_sign(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(1, 5, 3, 3))
        out = gate(x, GateParams(w_gate=Tensor(r.normal(scale=10, size=5)))).data
        assert np.all(np.sign(out) * np.sign(x) >= 0)
        assert np.all(np.abs(out) <= np.abs(x))


class TestCrossAttention:
    def test_identical_value_rows_add_a_constant(self, rng):
        d = 4
        p = zero_kv_bias(AttnParams.init(rng, d))
        v = rng.normal(size=d)
        # V = K W_v; make every key row map to v by using constant keys
        clip = np.broadcast_to(rng.normal(size=(1, d, 1, 1)), (1, d, 3, 2)).copy()
        p.w_v.data[:] = 0.0
        p.b_v.data[:] = v
        det = rng.normal(size=(1, d, 4, 4))
        out = cross_attention_fuse(det, clip, p).data
        np.testing.assert_allclose(out, det + v.reshape(1, d, 1, 1), atol=1e-12)

    def test_single_key_weight_is_one(self, rng):
        d = 3
        p = AttnParams.init(rng, d)
        det = rng.normal(size=(1, d, 2, 3))
        clip = rng.normal(size=(1, d, 1, 1))
        _, w = attention(to_tokens(Tensor(det)), to_tokens(Tensor(clip)), p, return_weights=True)
        np.testing.assert_array_equal(w.data, np.ones((1, 6, 1)))
        vrow = clip.reshape(d) @ p.w_v.data + p.b_v.data
        out = cross_attention_fuse(det, clip, p).data
        np.testing.assert_allclose(out, det + vrow.reshape(1, d, 1, 1), atol=1e-12)

    def test_zero_clip_and_zero_biases_is_identity(self, rng):
        d = 4
        p = zero_kv_bias(AttnParams.init(rng, d))
        det = rng.normal(size=(2, d, 3, 3))
        out = cross_attention_fuse(det, np.zeros((2, d, 2, 5)), p).data
        np.testing.assert_array_equal(out, det)

    def test_attention_rows_sum_to_one(self, rng):
        p = AttnParams.init(rng, 5)
        _, w = attention(Tensor(rng.normal(size=(2, 7, 5))), Tensor(rng.normal(size=(2, 4, 5))), p,
                         return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)

    def test_d_model_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="d_model mismatch"):
            cross_attention_fuse(np.zeros((1, 4, 2, 2)), np.zeros((1, 3, 2, 2)), AttnParams.init(rng, 4))

    def test_residual_requires_dk_equal_d_model(self, rng):
        with pytest.raises(ValueError, match="d_k"):
            AffmParams.init(rng, 3, 3, d_model=4, d_k=6)


class TestAffmForward:
    def test_composition_matches_manual_steps(self, rng):
        p = AffmParams.init(rng, c_det=3, c_clip=2, d_model=4)
        det, clip = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 2, 2))
        manual = cross_attention_fuse(fap_forward(det, p.fap.det),
                                      gate(fap_forward(clip, p.fap.clip), p.gate), p.attn)
        np.testing.assert_array_equal(affm_forward(clip, det, p).data, manual.data)

    @pytest.mark.parametrize("hc,wc", [(1, 1), (2, 5), (4, 4), (7, 3)])
    def test_shape_law(self, rng, hc, wc):
        p = AffmParams.init(rng, c_det=3, c_clip=2, d_model=4)
        out = affm_forward(rng.normal(size=(1, 2, hc, wc)), rng.normal(size=(1, 3, 4, 6)), p)
        assert out.shape == (1, 4, 4, 6)

    def test_gate_suppression_identity(self, rng):
        p = AffmParams.init(rng, c_det=3, c_clip=3, d_model=4)
        p.gate.w_gate.data[:] = -30.0
        zero_kv_bias(p.attn)
        det, clip = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 2, 2))
        f_g = fap_forward(det, p.fap.det).data
        fused = affm_forward(clip, det, p).data
        assert np.abs(fused - f_g).max() < 1e-9 * (1 + np.abs(f_g).max())

    def test_clip_permutation_invariance(self, rng):
        p = AffmParams.init(rng, c_det=3, c_clip=2, d_model=4)
        det = rng.normal(size=(1, 3, 4, 4))
        clip = rng.normal(size=(1, 2, 3, 3))
        f_c = fap_forward(clip, p.fap.clip).data
        perm = rng.permutation(9)
        shuffled = f_c.reshape(1, 4, 9)[:, :, perm].reshape(1, 4, 3, 3)
        f_g = fap_forward(det, p.fap.det)
        a = cross_attention_fuse(f_g, gate(f_c, p.gate), p.attn).data
        b = cross_attention_fuse(f_g, gate(shuffled, p.gate), p.attn).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_gate_gradient_through_dice(self, rng):
        p = AffmParams.init(rng, c_det=3, c_clip=2, d_model=4)
        det, clip = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 2, 2, 2))
        target = rng.uniform(size=(1, 4, 4, 4)) > 0.5
        f = lambda: dice_loss(T.sigmoid(affm_forward(clip, det, p)), target)
        assert grad_check(f, [p.gate.w_gate]) < 1e-4

    def test_full_affm_with_dice_gradients(self, rng):
        p = AffmParams.init(rng, c_det=2, c_clip=2, d_model=3, hidden=3)
        det, clip = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 2, 2))
        target = rng.uniform(size=(1, 3, 3, 3)) > 0.5
        f = lambda: dice_loss(T.sigmoid(affm_forward(clip, det, p)), target)
        assert grad_check(f, p.parameters()) < 1e-4

    def test_no_dead_parameters(self, rng):
        p = AffmParams.init(rng, c_det=2, c_clip=2, d_model=3)
        det, clip = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 2, 2))
        w = rng.normal(size=(2, 3, 3, 3))
        with T.GradTape() as tape:
            y = (T.sigmoid(affm_forward(clip, det, p)) * w).sum()
        for (name, _), g in zip(p.named_parameters(), tape.gradient(y, p.parameters())):
            assert np.abs(g).max() > 0, name

    def test_multi_head_option_runs(self, rng):
        p = AffmParams.init(rng, c_det=2, c_clip=2, d_model=4, heads=2)
        out = affm_forward(rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 3, 3)), p)
        assert out.shape == (1, 4, 3, 3)
