import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samix import engine as E
from samix.engine import ContractError, DimensionError, Tensor
from samix.mixer import (
    MixerConfig,
    MixerParams,
    MixMask,
    content_forward,
    cutmix_mask,
    encode_lambda,
    generate_mask,
    lambda_adjust,
    mix_inputs,
    mixing_attention,
    mixup_mask,
)


def _mixer(channels=4, seed=7, **kw):
    return MixerParams(MixerConfig(channels=channels, **kw), np.random.default_rng(seed))


def _reference_mask(z_i, z_j, lam, state, out_hw):
    """Loop-by-loop eval-mode Mixer on one pair of (C, H, W) feature maps."""
    c, h, w = z_i.shape
    gamma = state["gamma"][0]
    toks = []
    for z, l in ((z_i, lam), (z_j, 1.0 - lam)):
        for y in range(h):
            for x in range(w):
                toks.append([(1.0 + gamma * l) * z[ch, y, x] for ch in range(c)])
    n = len(toks)
    wp = state["w_p"]
    d = wp.shape[0]
    proj = [[sum(wp[a][ch] * t[ch] for ch in range(c)) for a in range(d)] for t in toks]
    content = []
    for t in toks:
        hid = []
        for k in range(state["content.w1"].shape[0]):
            v = sum(state["content.w1"][k][ch] * t[ch] for ch in range(c))
            v = (v - state["content.bn.running_mean"][k]) / math.sqrt(state["content.bn.running_var"][k] + 1e-5)
            v = v * state["content.bn.weight"][k] + state["content.bn.bias"][k]
            hid.append(max(v, 0.0))
        content.append(sum(state["content.w2"][0][k] * hid[k] for k in range(len(hid))) + state["content.b2"][0])
    raw = np.zeros((h, w))
    for q in range(h * w):
        logits = [sum(proj[q][a] * proj[k][a] for a in range(d)) / math.sqrt(d) for k in range(n)]
        top = max(logits)
        e = [math.exp(v - top) for v in logits]
        tot = sum(e)
        agg = sum(e[k] / tot * content[k] for k in range(n))
        raw[q // w, q % w] = 1.0 / (1.0 + math.exp(-agg))
    out_h, out_w = out_hw
    up = np.zeros(out_hw)
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0, fy = int(sy), sy - int(sy)
        y1 = min(y0 + 1, h - 1)
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0, fx = int(sx), sx - int(sx)
            x1 = min(x0 + 1, w - 1)
            up[oy, ox] = (raw[y0, x0] * (1 - fx) + raw[y0, x1] * fx) * (1 - fy) + (
                raw[y1, x0] * (1 - fx) + raw[y1, x1] * fx
            ) * fy
    return up


class TestEncodeLambda:
    def test_gamma_zero_is_identity(self):
        z = Tensor(np.random.default_rng(0).standard_normal((2, 3, 2, 2)))
        out = encode_lambda(z, np.array([0.3, 0.8]), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, z.data)

    def test_arithmetic(self):
        out = encode_lambda(Tensor(np.ones((1, 2, 3, 3))), 0.5, Tensor(np.ones(1)))
        np.testing.assert_array_equal(out.data, 1.5)

    def test_gamma_gradient(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.standard_normal((2, 3, 2, 2)))
        wts = rng.standard_normal(z.shape)
        err = E.gradcheck(lambda g: E.sum_(E.mul(encode_lambda(z, np.array([0.2, 0.7]), g), wts)), Tensor([0.4]))
        assert err < 1e-6


class TestAttention:
    def test_identical_tokens_uniform(self):
        zt = Tensor(np.tile(np.random.default_rng(0).standard_normal(4), (1, 8, 1)))
        p = mixing_attention(zt, Tensor(np.random.default_rng(1).standard_normal((2, 4)))).data
        np.testing.assert_allclose(p, 1 / 8, atol=1e-15)

    def test_orthonormal_pair(self):
        zt = Tensor(np.eye(2)[None])
        p = mixing_attention(zt, Tensor(np.eye(2)), norm=1.0).data[0]
        s = math.exp(1) / (math.exp(1) + 1)
        np.testing.assert_allclose(p, [[s, 1 - s], [1 - s, s]], atol=1e-15)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_rows_stochastic(self, seed, half):
        rng = np.random.default_rng(seed)
        p = mixing_attention(Tensor(rng.standard_normal((2, 2 * half, 6)) * 3), Tensor(rng.standard_normal((3, 6)))).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    def test_odd_token_count(self):
        with pytest.raises(ContractError):
            mixing_attention(Tensor(np.ones((1, 3, 2))), Tensor(np.ones((1, 2))))


class TestContent:
    def test_zero_weights(self):
        mixer = _mixer(6)
        for k in ("content.w1", "content.w2", "content.bn.bias", "content.b2"):
            mixer.params[k].data[...] = 0.0
        zt = Tensor(np.random.default_rng(0).standard_normal((2, 8, 6)))
        np.testing.assert_array_equal(content_forward(zt, mixer, "eval").data, 0.0)

    def test_eval_deterministic(self):
        mixer = _mixer(6)
        zt = Tensor(np.random.default_rng(0).standard_normal((2, 8, 6)))
        a = content_forward(zt, mixer, "eval").data
        b = content_forward(zt, mixer, "eval").data
        assert a.tobytes() == b.tobytes()

    def test_dropout_fraction(self):
        h = E.dropout(Tensor(np.ones(10_000)), 0.1, np.random.default_rng(0), train=True).data
        assert abs((h == 0).mean() - 0.1) < 0.02

    def test_train_mode_needs_no_mutation_when_asked(self):
        mixer = _mixer(6)
        before = {k: v.copy() for k, v in mixer.buffers.items()}
        zt = Tensor(np.random.default_rng(0).standard_normal((2, 8, 6)))
        content_forward(zt, mixer, "train", np.random.default_rng(0), update_stats=False)
        assert all(np.array_equal(before[k], mixer.buffers[k]) for k in before)
        content_forward(zt, mixer, "train", np.random.default_rng(0))
        assert not np.array_equal(before["content.bn.running_mean"], mixer.buffers["content.bn.running_mean"])


class TestGenerateMask:
    def test_reference_seed7(self):
        rng = np.random.default_rng(7)
        mixer = _mixer(4, seed=7)
        mixer.params["gamma"].data[...] = 0.6
        mixer.params["content.bn.weight"].data[...] = rng.uniform(0.5, 1.5, 2)
        mixer.params["content.bn.bias"].data[...] = rng.standard_normal(2)
        mixer.params["content.b2"].data[...] = 0.3
        mixer.buffers["content.bn.running_mean"][...] = rng.standard_normal(2)
        mixer.buffers["content.bn.running_var"][...] = rng.uniform(0.5, 2.0, 2)
        z_i, z_j = rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2))
        mask = generate_mask(Tensor(z_i), Tensor(z_j), 0.35, mixer, (8, 8), "eval")
        ref = _reference_mask(z_i, z_j, 0.35, mixer.state(), (8, 8))
        np.testing.assert_allclose(mask.s_i.data, ref, atol=1e-9, rtol=0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        mixer = _mixer(4)
        mixer.params["gamma"].data[...] = 0.5
        z_i, z_j = rng.standard_normal((3, 4, 2, 2)), rng.standard_normal((3, 4, 2, 2))
        lam = np.array([0.2, 0.5, 0.9])
        batch = generate_mask(Tensor(z_i), Tensor(z_j), lam, mixer, (6, 6), "eval").s_i.data
        for b in range(3):
            one = generate_mask(Tensor(z_i[b]), Tensor(z_j[b]), lam[b], mixer, (6, 6), "eval").s_i.data
            np.testing.assert_allclose(batch[b, 0], one, atol=1e-12)

    def test_constant_content_gives_constant_mask(self):
        mixer = _mixer(4, content="linear")
        mixer.params["content.w"].data[...] = 0.0
        mixer.params["content.b"].data[...] = 1.3
        rng = np.random.default_rng(3)
        mask = generate_mask(
            Tensor(rng.standard_normal((2, 4, 3, 3))), Tensor(rng.standard_normal((2, 4, 3, 3))), 0.4, mixer, (9, 9), "eval"
        )
        np.testing.assert_allclose(mask.s_i.data, 1 / (1 + math.exp(-1.3)), atol=1e-12)

    def test_eval_deterministic(self):
        mixer = _mixer(8)
        rng = np.random.default_rng(4)
        z = Tensor(rng.standard_normal((2, 8, 4, 4)))
        a = generate_mask(z, z, 0.3, mixer, (16, 16), "eval").s_i.data
        b = generate_mask(z, z, 0.3, mixer, (16, 16), "eval").s_i.data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("lam", [0.0, 1.0, -0.2, 1.5])
    def test_lambda_range(self, lam):
        z = Tensor(np.ones((1, 4, 2, 2)))
        with pytest.raises(ContractError):
            generate_mask(z, z, lam, _mixer(4), (4, 4), "eval")

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            generate_mask(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((1, 4, 3, 3))), 0.5, _mixer(4), (4, 4), "eval")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99), st.sampled_from(["train", "eval"]))
    def test_mask_invariants(self, seed, lam, mode):
        rng = np.random.default_rng(seed)
        mixer = MixerParams(MixerConfig(channels=8), rng)
        mixer.params["gamma"].data[...] = rng.uniform()
        z_i, z_j = Tensor(rng.standard_normal((2, 8, 4, 4)) * 3), Tensor(rng.standard_normal((2, 8, 4, 4)) * 3)
        mask = generate_mask(z_i, z_j, lam, mixer, (16, 16), mode, rng)
        s = mask.s_i.data
        assert s.min() >= 0.0 and s.max() <= 1.0
        assert np.array_equal(mask.s_j.data, 1.0 - s)
        adj = lambda_adjust(mask)
        assert np.all(np.abs(adj.means() - lam) < 1e-9)
        assert adj.s_i.data.min() >= 0.0 and adj.s_i.data.max() <= 1.0

    def test_differentiable_to_features(self):
        rng = np.random.default_rng(5)
        mixer = _mixer(4)
        mixer.params["gamma"].data[...] = 0.4
        z_j = Tensor(rng.standard_normal((2, 4, 2, 2)))
        x_i, x_j = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 3, 4, 4))
        wts = rng.standard_normal((2, 3, 4, 4))

        def f(z):
            m = generate_mask(z, z_j, np.array([0.3, 0.6]), mixer, (4, 4), "train", np.random.default_rng(0), False)
            return E.sum_(E.mul(mix_inputs(x_i, x_j, m), wts))

        assert E.gradcheck(f, Tensor(rng.standard_normal((2, 4, 2, 2)))) < 1e-4


def _const(v, hw=(4, 4)):
    return MixMask(Tensor(np.full(hw, v)), 0.5)


class TestLambdaAdjust:
    def test_fixed_point(self):
        np.testing.assert_array_equal(lambda_adjust(_const(0.5), 0.5).s_i.data, 0.5)

    def test_shrink(self):
        np.testing.assert_allclose(lambda_adjust(_const(0.8), 0.4).s_i.data, 0.4, atol=1e-15)

    def test_grow(self):
        out = lambda_adjust(_const(0.25), 0.5)
        np.testing.assert_allclose(out.s_j.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(out.s_i.data, 0.5, atol=1e-15)

    @pytest.mark.parametrize("lam", [0.0, 1.0])
    def test_range(self, lam):
        with pytest.raises(ContractError):
            lambda_adjust(_const(0.5), lam)

    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1 - 1e-3))
    def test_hits_target(self, seed, lam):
        s = np.random.default_rng(seed).uniform(0.01, 0.99, (8, 8))
        out = lambda_adjust(MixMask(Tensor(s), lam))
        assert abs(out.s_i.data.mean() - lam) < 1e-9
        assert out.s_i.data.min() >= 0.0 and out.s_i.data.max() <= 1.0


class TestMixInputs:
    def test_same_sources(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(2, 3, 4, 4))
        m = MixMask(Tensor(rng.uniform(size=(2, 1, 4, 4))), np.array([0.3, 0.6]))
        np.testing.assert_allclose(mix_inputs(x, x, m).data, x, atol=1e-15)

    def test_all_ones(self):
        rng = np.random.default_rng(1)
        x_i, x_j = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
        np.testing.assert_array_equal(mix_inputs(x_i, x_j, MixMask(Tensor(np.ones((4, 4))), 0.99)).data, x_i)

    @given(st.integers(0, 2**32 - 1))
    def test_convex_bound(self, seed):
        rng = np.random.default_rng(seed)
        x_i, x_j = rng.standard_normal((3, 5, 5)), rng.standard_normal((3, 5, 5))
        xm = mix_inputs(x_i, x_j, MixMask(Tensor(rng.uniform(size=(5, 5))), 0.5)).data
        assert np.all(xm >= np.minimum(x_i, x_j) - 1e-12) and np.all(xm <= np.maximum(x_i, x_j) + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mix_inputs(np.ones((3, 4, 4)), np.ones((3, 4, 4)), MixMask(Tensor(np.ones((5, 5))), 0.5))


class TestBaselines:
    def test_mixup_constant(self):
        m = mixup_mask(0.7, (6, 6))
        np.testing.assert_array_equal(m.s_i.data, 0.7)
        assert m.lam == 0.7
        # every coordinate is exactly 0.7; the float mean may differ by rounding
        assert abs(m.means()[0] - 0.7) < 1e-15

    def test_mixup_is_linear_interpolation(self):
        rng = np.random.default_rng(0)
        x_i, x_j = rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 6, 6))
        xm = mix_inputs(x_i, x_j, mixup_mask(0.3, (6, 6))).data
        np.testing.assert_allclose(xm, 0.3 * x_i + 0.7 * x_j, atol=1e-15)

    def test_cutmix_limit(self):
        m = cutmix_mask(1 - 1e-9, (32, 32), np.random.default_rng(0))
        np.testing.assert_array_equal(m.s_i.data, 1.0)

    def test_cutmix_area(self):
        m = cutmix_mask(0.75, (32, 32), np.random.default_rng(0), center=(16, 16))
        assert m.means()[0] == 0.75 and m.lam == 0.75

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
    def test_cutmix_binary_and_realised(self, seed, lam):
        m = cutmix_mask(lam, (32, 32), np.random.default_rng(seed))
        assert set(np.unique(m.s_i.data)) <= {0.0, 1.0}
        assert m.lam == m.means()[0]
        np.testing.assert_array_equal(m.s_j.data, 1.0 - m.s_i.data)


class TestParams:
    def test_gamma_starts_at_zero(self):
        assert _mixer(8).gamma.data[0] == 0.0

    def test_clamp(self):
        mixer = _mixer(4)
        mixer.gamma.data[...] = 1.7
        mixer.clamp()
        assert mixer.gamma.data[0] == 1.0
        mixer.gamma.data[...] = -0.2
        mixer.clamp()
        assert mixer.gamma.data[0] == 0.0

    def test_default_projection_width(self):
        mixer = _mixer(64)
        assert mixer.params["w_p"].shape == (32, 64)
