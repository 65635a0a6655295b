import numpy as np
import pytest

from models.d3net import D3Net, ModelState, NetworkConfig, loss_l1, restore_image, train_step
from models.errors import AlignmentError, NonFiniteError, ShapeError
from models.tensor import Tensor, grad_check, mul, no_grad, sum_

TINY = dict(base_channels=4, N_stages=2, freq_channels=4, prompt_dim=4, strategy_dim=3, seed=3)


def tiny(**overrides):
    return NetworkConfig(**{**TINY, **overrides})


@pytest.fixture
def net():
    return D3Net(tiny())


@pytest.fixture
def image():
    return Tensor(np.random.default_rng(0).random((3, 8, 8)))


class TestNetworkConfig:
    """ Validated hyperparameters """

    def test_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.base_channels, cfg.unet_depth, cfg.N_stages) == (16, 3, 12)
        assert cfg.attention_preset == "f" and cfg.gate_mode == "hard"

    def test_rejects_unknown_and_invalid(self):
        with pytest.raises(ValueError):
            NetworkConfig(colour="red")
        with pytest.raises(ValueError):
            NetworkConfig(N_stages=0)
        with pytest.raises(ValueError):
            NetworkConfig(attention_preset="g")


class TestForward:
    """ Two-branch forward pass """

    def test_shapes(self, net, image):
        assert net.encode_shallow(image).shape == (4, 8, 8)
        out, traces = net.forward(image)
        assert out.shape == image.shape
        assert len(traces) == 2

    def test_misaligned_input_reports_padding(self, net):
        with pytest.raises(AlignmentError) as info:
            net.forward(Tensor(np.zeros((3, 10, 8))))
        assert info.value.pad_h == 6 and info.value.pad_w == 0

    def test_wrong_channel_count(self, net):
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 8, 8))))

    def test_shallow_features_of_zero_input(self, net):
        # biases start at zero
        assert not net.encode_shallow(Tensor(np.zeros((3, 8, 8)))).data.any()

    def test_initial_weight_scales(self, net):
        conv = net.encoders[0].conv1
        assert np.abs(conv.weight.data).max() <= np.sqrt(2.0) * np.sqrt(3.0 / 27)
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                assert not p.data.any(), name
        head_bound = 0.25 * np.sqrt(3.0 / (4 * 9))
        assert np.abs(net.head.weight.data).max() <= head_bound
        assert np.abs(net.stages[0].block.out.weight.data).max() <= head_bound

    def test_infer_is_bitwise_deterministic(self, image):
        a, _ = D3Net(tiny()).forward(image)
        b, _ = D3Net(tiny()).forward(image)
        np.testing.assert_array_equal(a.data, b.data)

    def test_closed_gates_and_zero_refinement_give_plain_unet(self, net, image):
        net.refine.conv2.weight.data = np.zeros_like(net.refine.conv2.weight.data)
        net.refine.conv2.bias.data = np.zeros_like(net.refine.conv2.bias.data)
        restored, _ = net.forward(image, rho_override=0.0)
        np.testing.assert_array_equal(restored.data, net.reconstruct(image).data)

    def test_decision_units_off_runs_every_stage(self, image):
        _, traces = D3Net(tiny(use_decision_units=False)).forward(image)
        assert all(t.activated and t.forced for t in traces)

    def test_presets_a_and_f_differ(self):
        img = Tensor(np.random.default_rng(1).random((3, 32, 32)))
        a, _ = D3Net(tiny(attention_preset="a")).forward(img)
        f, _ = D3Net(tiny(attention_preset="f")).forward(img)
        assert np.all(np.isfinite(a.data)) and np.all(np.isfinite(f.data))
        assert np.abs(a.data - f.data).max() > 1e-6

    def test_decomposition_flops(self, net, image):
        _, traces = net.forward(image, rho_override=1.0)
        report = net.decomposition_flops(traces, 8, 8)
        assert report.total_flops == sum(s.block.macs(8, 8) for s in net.stages)

    def test_restore_pads_and_crops(self, net):
        img = np.random.default_rng(2).random((3, 10, 13))
        restored, _ = restore_image(net, img)
        assert restored.shape == img.shape
        assert restored.min() >= 0.0 and restored.max() <= 1.0


class TestEndToEndGradient:
    """ Analytic vs finite-difference gradients through the whole network """

    def test_parameters(self, net, image):
        noise = [np.array([0.3, -0.5]), np.array([-0.2, 0.1])]
        w = Tensor(np.random.default_rng(7).normal(size=image.shape))

        def f(_):
            restored, _ = net.forward(image, "train", tau=1.0, noise=noise)
            return sum_(mul(restored, w))

        params = [net.head.bias, net.stages[0].unit.fc.bias, net.stages[1].block.out.bias,
                  net.cdda.correction.out_proj.bias]
        for p in params:
            assert grad_check(f, p, 1e-5) < 1e-3


class TestLoss:
    """ Mean absolute error """

    def test_zero_for_equal(self, image):
        assert loss_l1(image, image.data).item() == 0.0

    def test_constant_offset(self, image):
        assert loss_l1(image + 0.5, image).item() == pytest.approx(0.5)

    def test_matches_loop(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((3, 4, 5)), rng.random((3, 4, 5))
        total = 0.0
        for v in np.nditer(a - b):
            total += abs(float(v))
        assert loss_l1(Tensor(a), b).item() == pytest.approx(total / a.size, rel=1e-12)

    def test_shape_mismatch(self, image):
        with pytest.raises(ShapeError):
            loss_l1(image, np.zeros((3, 8, 4)))


class TestTrainStep:
    """ Optimization step """

    def test_loss_decreases_monotonically(self):
        state = ModelState.create(tiny())
        rng = np.random.default_rng(8)
        # targets well below the inputs keep every residual positive, away from the L1 kink
        batch = [(rng.random((3, 8, 8)), np.full((3, 8, 8), -2.0)) for _ in range(2)]
        losses = []
        # a long schedule keeps tau and lr nearly constant over the 50 steps taken
        for step in range(50):
            result = train_step(batch, state, step, 10_000, np.random.default_rng(0), lr_init=3e-4, lr_final=3e-6)
            losses.append(result.loss)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_reports_schedules(self):
        state = ModelState.create(tiny())
        batch = [(np.random.default_rng(1).random((3, 8, 8)), np.zeros((3, 8, 8)))]
        result = train_step(batch, state, 0, 10, np.random.default_rng(0))
        assert result.lr == 1e-4 and result.tau == 1.0
        assert 0.0 <= result.active_stage_rate <= 1.0
        assert state.optimizer.step_count == 1

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step([], ModelState.create(tiny()), 0, 10, np.random.default_rng(0))

    def test_non_finite_loss(self):
        state = ModelState.create(tiny())
        state.network.head.bias.data = np.full(3, 1e308)
        batch = [(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))]
        with pytest.raises(NonFiniteError):
            train_step(batch, state, 0, 10, np.random.default_rng(0))

    def test_state_keys(self):
        state = ModelState.create(tiny())
        keys = set(state.tensors())
        assert "head.weight" in keys and "optimizer.step" in keys
        assert "optimizer.m.head.weight" in keys and "optimizer.v.head.weight" in keys
        assert any(k.startswith("stages.1.block.") for k in keys)

    def test_grads_do_not_leak_under_no_grad(self, net, image):
        with no_grad():
            out, _ = net.forward(image)
        assert not out.requires_grad
