import numpy as np
import pytest

from models.cdda import (PRESETS, CrossDomainAnalyzer, FrequencyAnalyzer, attention_preset, cross_attention,
                         freq_feature_extract, generate_prompts)
from models.errors import ShapeError
from models.spectral import log_amplitude
from models.tensor import (Tensor, avg_pool2d, backward, conv2d, from_tokens, grad_check, max_pool2d, mul, relu,
                           sum_, to_tokens, upsample_bilinear)


def make_analyzer(preset="f", seed=0, **flags):
    rng = np.random.default_rng(seed)
    return CrossDomainAnalyzer(attention_preset(preset), 3, 4, 6, 8, 5, rng, **flags)


@pytest.fixture
def image():
    return Tensor(np.random.default_rng(42).random((3, 16, 16)))


class TestPresets:
    """ Q/K/V routing table """

    def test_six_presets(self):
        assert sorted(PRESETS) == ["a", "b", "c", "d", "e", "f"]

    def test_projection_roles(self):
        for cfg in PRESETS.values():
            assert cfg.correction.projected == "v"
            assert cfg.strategy.projected == "q"

    def test_preset_f_routing(self):
        f = attention_preset("f")
        assert (f.correction.q, f.correction.k, f.correction.v) == ("frequency", "frequency", "spatial")
        assert (f.strategy.q, f.strategy.k, f.strategy.v) == ("frequency", "spatial", "spatial")

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            attention_preset("z")


class TestCrossAttention:
    """ softmax(QK^T / sqrt(d)) V """

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(np.ones((5, 4)))
        v = Tensor(rng.normal(size=(5, 4)))
        out = cross_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.normal(size=s) for s in ((4, 6), (7, 6), (7, 6)))
        logits = q @ k.T / np.sqrt(6)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out = cross_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, w @ v, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            cross_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))
        with pytest.raises(ShapeError):
            cross_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        k, v = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3)))
        w = Tensor(rng.normal(size=(4, 3)))
        err = grad_check(lambda q: sum_(mul(cross_attention(q, k, v), w)), rng.normal(size=(4, 3)), 1e-5)
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_query_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        q, k, v = (rng.normal(size=s) for s in ((6, 4), (5, 4), (5, 4)))
        perm = rng.permutation(6)
        out = cross_attention(Tensor(q), Tensor(k), Tensor(v)).data
        permuted = cross_attention(Tensor(q[perm]), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(permuted, out[perm], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("alpha,beta", [(2.0, 0.5), (3.0, 1.5), (-1.0, 0.25)])
    def test_joint_query_key_scale_moves_into_factor(self, alpha, beta):
        rng = np.random.default_rng(4)
        q, k, v = (rng.normal(size=s) for s in ((3, 4), (5, 4), (5, 4)))
        scaled = cross_attention(Tensor(alpha * q), Tensor(beta * k), Tensor(v))
        folded = cross_attention(Tensor(q), Tensor(k), Tensor(v), scale_factor=alpha * beta / np.sqrt(4))
        np.testing.assert_allclose(scaled.data, folded.data, rtol=0, atol=1e-12)

    def test_single_key_returns_its_value(self):
        rng = np.random.default_rng(6)
        q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        out = cross_attention(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v, (4, 1)), rtol=0, atol=1e-15)


class TestFrequencyAnalyzer:
    """ D_f extraction """

    def test_quarter_resolution(self, image):
        analyzer = FrequencyAnalyzer(6, np.random.default_rng(0))
        feats = freq_feature_extract(log_amplitude(image), analyzer)
        assert feats.shape == (6, 4, 4)

    def test_too_small(self):
        analyzer = FrequencyAnalyzer(6, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            analyzer(Tensor(np.ones((1, 3, 8))))

    def test_matches_primitive_composition(self, image):
        analyzer = FrequencyAnalyzer(6, np.random.default_rng(1))
        M = log_amplitude(image)
        x = relu(conv2d(M, analyzer.conv1.weight, 1, 1, analyzer.conv1.bias))
        x = max_pool2d(x, 2, 2)
        x = relu(conv2d(x, analyzer.conv2.weight, 1, 1, analyzer.conv2.bias))
        x = max_pool2d(x, 2, 2)
        np.testing.assert_allclose(freq_feature_extract(M, analyzer).D_f.data, x.data, rtol=0, atol=1e-12)


class TestPrompts:
    """ Correction and strategy prompts """

    def test_shapes(self, image):
        prompts = make_analyzer()(image)
        assert prompts.C_t.shape == (4, 16, 16)
        assert prompts.S_t.shape == (5,)

    @pytest.mark.parametrize("preset", sorted(PRESETS))
    def test_every_preset_is_finite_at_32(self, preset):
        img = Tensor(np.random.default_rng(3).random((3, 32, 32)))
        prompts = make_analyzer(preset)(img)
        assert np.all(np.isfinite(prompts.C_t.data)) and np.all(np.isfinite(prompts.S_t.data))

    def test_presets_differ(self, image):
        a = make_analyzer("a")(image)
        f = make_analyzer("f")(image)
        assert not np.allclose(a.C_t.data, f.C_t.data)

    def test_grid_mismatch_rejected(self, image):
        cdda = make_analyzer()
        with pytest.raises(ShapeError):
            generate_prompts(image, Tensor(np.ones((6, 3, 3))), cdda)

    def test_disabled_prompts_are_zero(self, image):
        prompts = make_analyzer(use_correction_prompt=False, use_strategy_prompt=False)(image)
        assert not prompts.C_t.data.any()
        assert not prompts.S_t.data.any()

    def test_attention_switch_changes_prompts(self, image):
        with_attn = make_analyzer()(image)
        without = make_analyzer(use_cross_attention=False)(image)
        assert not np.allclose(with_attn.C_t.data, without.C_t.data)

    def test_frequency_switch_uses_luminance(self, image):
        on = make_analyzer()
        off = make_analyzer(use_frequency=False)
        np.testing.assert_allclose(on.frequency_input(image).data, log_amplitude(image).data)
        assert off.frequency_input(image).shape == (1, 16, 16)
        assert not np.allclose(on(image).S_t.data, off(image).S_t.data)

    def test_gradient_reaches_prompt_parameters(self, image):
        cdda = make_analyzer()
        w = Tensor(np.random.default_rng(9).normal(size=(4, 16, 16)))
        bias = cdda.correction.out_proj.bias
        assert grad_check(lambda _: sum_(mul(cdda(image).C_t, w)), bias, 1e-5) < 1e-4

    def test_macs_drop_without_attention(self):
        assert make_analyzer(use_cross_attention=False).macs(16, 16) < make_analyzer().macs(16, 16)

    def test_preset_f_matches_hand_routed_attention(self, image):
        cdda = make_analyzer("f")
        prompts = cdda(image)

        freq = freq_feature_extract(cdda.frequency_input(image), cdda.analyzer).D_f
        spatial = avg_pool2d(image, 4)
        _, hq, wq = freq.shape

        corr = cdda.correction
        q = corr.q_proj(to_tokens(freq))
        k = corr.k_proj(to_tokens(freq))
        v = corr.v_proj(to_tokens(corr.phi(spatial)))
        c_small = from_tokens(corr.out_proj(cross_attention(q, k, v)), hq, wq)
        np.testing.assert_allclose(prompts.C_t.data, upsample_bilinear(c_small, 16, 16).data, rtol=0, atol=1e-12)

        strat = cdda.strategy
        q = strat.q_proj(to_tokens(strat.phi(freq)))
        k = strat.k_proj(to_tokens(spatial))
        v = strat.v_proj(to_tokens(spatial))
        tokens = cross_attention(q, k, v).data
        expected = tokens.mean(axis=0) @ strat.out_proj.weight.data + strat.out_proj.bias.data
        np.testing.assert_allclose(prompts.S_t.data, expected, rtol=0, atol=1e-12)

    def test_frequency_branch_passes_no_gradient_to_image(self, image):
        cdda = make_analyzer()
        assert not cdda.frequency_input(Tensor(image.data, requires_grad=True)).requires_grad
        fixed = freq_feature_extract(cdda.frequency_input(image), cdda.analyzer).D_f.detach()
        w = Tensor(np.random.default_rng(5).normal(size=5))

        full = Tensor(image.data.copy(), requires_grad=True)
        backward(sum_(mul(cdda(full).S_t, w)), inputs=[full])
        held = Tensor(image.data.copy(), requires_grad=True)
        backward(sum_(mul(generate_prompts(held, fixed, cdda).S_t, w)), inputs=[held])
        np.testing.assert_array_equal(full.grad, held.grad)

        err = grad_check(lambda t: sum_(mul(generate_prompts(t, fixed, cdda).S_t, w)), image.data.copy(), 1e-5)
        assert err < 1e-4
