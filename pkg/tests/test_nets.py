import numpy as np
import pytest

from jitterlu import autodiff as ad
from jitterlu.autodiff import Tape, Tensor, finite_difference_grad
from jitterlu.nets import (Dncnn1dArch, GradientNet, MlpArch, arch_from_descriptor,
                           lipschitz_estimate)

from conftest import rel_err


def linear_net(matrix: np.ndarray) -> GradientNet:
    """Single-layer MLP acting as f(x) = x @ W, W = matrix^T."""
    n = matrix.shape[0]
    net = GradientNet.build(MlpArch((n, n)), seed=0)
    net.load_arrays({"w0": matrix.T.copy(), "b0": np.zeros(n)})
    return net


class TestBuild:
    def test_mlp_param_count_formula(self):
        arch = MlpArch((2, 32, 32, 2))
        want = 2 * 32 + 32 + 32 * 32 + 32 + 32 * 2 + 2
        assert arch.param_count() == want
        net = GradientNet.build(arch, seed=3)
        assert net.param_count() == want

    def test_dncnn_param_count(self):
        arch = Dncnn1dArch(depth=5, channels=64, kernel_len=3)
        want = (64 * 1 * 3 + 64) + 3 * (64 * 64 * 3 + 64) + (1 * 64 * 3 + 1)
        assert arch.param_count() == want

    def test_same_seed_identical_parameters(self):
        a = GradientNet.build(MlpArch((2, 8, 2)), seed=7)
        b = GradientNet.build(MlpArch((2, 8, 2)), seed=7)
        for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
            assert na == nb and np.array_equal(ta.data, tb.data)
        c = GradientNet.build(MlpArch((2, 8, 2)), seed=8)
        assert not np.array_equal(a.parameters()[0][1].data, c.parameters()[0][1].data)

    def test_dncnn_preserves_trace_length(self, rng):
        net = GradientNet.build(Dncnn1dArch(depth=5, channels=64), seed=0)
        x = rng.standard_normal((6, 40))
        assert net.apply_array(x).shape == (6, 40)
        xb = rng.standard_normal((2, 6, 40))
        assert net.apply_array(xb).shape == (2, 6, 40)

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            MlpArch((2, 0, 2))

    def test_descriptor_roundtrip(self):
        for arch in (MlpArch((2, 16, 2)), Dncnn1dArch(4, 8, 5, "tanh")):
            assert arch_from_descriptor(arch.descriptor()) == arch


class TestForward:
    def test_zero_final_layer_gives_zero_output(self, rng):
        net = GradientNet.build(MlpArch((2, 8, 2)), seed=1)
        arrays = net.state_arrays()
        arrays["w1"][:] = 0.0
        arrays["b1"][:] = 0.0
        net.load_arrays(arrays)
        assert np.array_equal(net.apply_array(rng.standard_normal(2)), np.zeros(2))

    def test_zero_weight_dncnn_is_zero_map(self, rng):
        net = GradientNet.build(Dncnn1dArch(depth=3, channels=4), seed=0)
        net.load_arrays({k: np.zeros_like(v) for k, v in net.state_arrays().items()})
        assert np.array_equal(net.apply_array(rng.standard_normal((3, 16))), np.zeros((3, 16)))

    def test_zero_stack_proximal_is_identity(self, rng):
        net = GradientNet.build(MlpArch((2, 8, 2)), seed=1, role="proximal")
        arrays = {k: np.zeros_like(v) for k, v in net.state_arrays().items()}
        net.load_arrays(arrays)
        x = rng.standard_normal(2)
        assert np.array_equal(net.apply_array(x), x)

    def test_batched_matches_single(self, rng):
        net = GradientNet.build(MlpArch((3, 8, 3)), seed=2)
        xb = rng.standard_normal((5, 3))
        got = net.apply_array(xb)
        want = np.stack([net.apply_array(xb[i]) for i in range(5)])
        assert np.allclose(got, want, atol=1e-15)

    def test_gradient_wrt_input_matches_fd(self, rng):
        net = GradientNet.build(MlpArch((2, 6, 2), activation="tanh"), seed=4)
        x = rng.uniform(-1, 1, 2)
        u = rng.standard_normal(2)
        with Tape() as tape:
            xt = Tensor(x, requires_grad=True)
            tape.backward(ad.dot(net.forward(xt), Tensor(u)))
        fd = finite_difference_grad(lambda a: float(net.apply_array(a) @ u), x.copy())
        assert rel_err(xt.grad, fd) < 1e-5

    @pytest.mark.parametrize("arch", [MlpArch((2, 5, 2), activation="tanh"),
                                      Dncnn1dArch(depth=3, channels=3)],
                             ids=["mlp", "dncnn"])
    def test_gradient_wrt_weights_matches_fd(self, arch, rng):
        net = GradientNet.build(arch, seed=5)
        x = rng.uniform(-1, 1, (2, 8) if isinstance(arch, Dncnn1dArch) else (2,))
        u = rng.standard_normal(x.shape)
        with Tape() as tape:
            tape.backward(ad.dot(net.forward(Tensor(x)), Tensor(u)))
        for name, t in net.parameters():
            def loss_np(arr, name=name, keep=t.data):
                t.data = arr
                val = float((net.apply_array(x) * u).sum())
                t.data = keep
                return val

            fd = finite_difference_grad(loss_np, t.data.copy(), step=1e-6)
            assert rel_err(t.grad, fd) < 1e-5, name

    def test_frozen_blocks_weight_grads(self, rng):
        net = GradientNet.build(MlpArch((2, 4, 2)), seed=6)
        x = rng.standard_normal(2)
        with Tape() as tape, net.frozen():
            xt = Tensor(x, requires_grad=True)
            tape.backward(ad.sum_all(net.forward(xt)))
        assert xt.grad is not None
        assert all(t.grad is None for _, t in net.parameters())


class TestLipschitzEstimate:
    def test_linear_diagonal(self):
        net = linear_net(np.diag([2.0, 0.5]))
        est = lipschitz_estimate(net, (2,), probes=16, seed=0)
        assert est == pytest.approx(2.0, rel=1e-6)

    def test_zero_net(self):
        net = linear_net(np.zeros((2, 2)))
        assert lipschitz_estimate(net, (2,), probes=8, seed=0) == 0.0

    def test_monotone_in_probe_count(self):
        net = GradientNet.build(MlpArch((2, 16, 2)), seed=9)
        est_small = lipschitz_estimate(net, (2,), probes=4, seed=0)
        est_big = lipschitz_estimate(net, (2,), probes=64, seed=0)
        assert est_big >= est_small
