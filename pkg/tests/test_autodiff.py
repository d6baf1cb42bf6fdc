import numpy as np
import pytest

from jitterlu import autodiff as ad
from jitterlu.autodiff import ShapeMismatch, Tape, Tensor, finite_difference_grad

from conftest import rel_err


def grad_of(build_loss, *leaves):
    """Run build_loss(*tensors) on a fresh tape, return leaf gradients."""
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in leaves]
    with Tape() as tape:
        loss = build_loss(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors]


class TestElementwise:
    def test_add_values(self):
        out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_mul_by_zero_annihilates_and_zero_grad(self):
        (gx,) = grad_of(lambda x: ad.sum_all(ad.mul(x, Tensor([0.0, 0.0]))), [1.5, -2.0])
        assert np.array_equal(gx, [0.0, 0.0])

    def test_hadamard_grad_is_other_factor(self, rng):
        a = rng.uniform(-1, 1, 6)
        b = rng.uniform(-1, 1, 6)
        ga, gb = grad_of(lambda x, y: ad.sum_all(ad.mul(x, y)), a, b)
        assert rel_err(ga, b) < 1e-12
        fd = finite_difference_grad(
            lambda arr: float((arr * b).sum()), a.copy(), step=1e-6)
        assert rel_err(ga, fd) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatch) as err:
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))))
        assert "(3,)" in str(err.value) and "(2, 2)" in str(err.value)

    def test_scalar_broadcast(self):
        out = ad.add(Tensor([1.0, 2.0]), Tensor(0.5))
        assert np.array_equal(out.data, [1.5, 2.5])
        (gs,) = grad_of(lambda s: ad.sum_all(ad.mul(Tensor([1.0, 2.0, 3.0]), s)), 2.0)
        assert gs == pytest.approx(6.0)


class TestMatvec:
    def test_identity(self):
        out = ad.matvec(Tensor(np.eye(3)), Tensor([1.0, -2.0, 0.5]))
        assert np.array_equal(out.data, [1.0, -2.0, 0.5])

    def test_hand_example(self):
        out = ad.matvec(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
        assert np.array_equal(out.data, [3.0, 7.0])

    def test_adjoint_identity(self, rng):
        m = rng.standard_normal((5, 4))
        v = rng.standard_normal(4)
        u = rng.standard_normal(5)
        lhs = float(np.dot(m @ v, u))
        rhs = float(np.dot(v, m.T @ u))
        assert abs(lhs - rhs) < 1e-12
        # backward rule produces M^T g into v
        (gv,) = grad_of(lambda vt: ad.dot(ad.matvec(Tensor(m), vt), Tensor(u)), v)
        assert rel_err(gv, m.T @ u) < 1e-12


class TestConv1d:
    def test_delta_kernel_is_identity(self, rng):
        sig = rng.standard_normal((1, 9))
        out = ad.conv1d(Tensor(sig), Tensor(np.array([[[0.0, 1.0, 0.0]]])))
        assert np.array_equal(out.data, sig)

    def test_batched_matches_per_sample(self, rng):
        sig = rng.standard_normal((4, 2, 7))
        ker = rng.standard_normal((3, 2, 5))
        batched = ad.conv1d(Tensor(sig), Tensor(ker)).data
        singles = np.stack([ad.conv1d(Tensor(sig[i]), Tensor(ker)).data for i in range(4)])
        assert np.array_equal(batched, singles)

    def test_box_kernel_hand_example(self):
        out = ad.conv1d(Tensor([[0.0, 1.0, 0.0, 0.0]]), Tensor([[[1.0, 1.0, 1.0]]]))
        assert np.array_equal(out.data, [[1.0, 1.0, 1.0, 0.0]])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv1d(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 1, 4))))

    def test_kernel_gradient_matches_fd(self, rng):
        sig = rng.uniform(-1, 1, (2, 3, 10))
        ker = rng.uniform(-1, 1, (4, 3, 3))
        tgt = rng.uniform(-1, 1, (2, 4, 10))

        def loss_np(k):
            outs = []
            for b in range(2):
                row = np.zeros((4, 10))
                for co in range(4):
                    for ci in range(3):
                        row[co] += np.correlate(sig[b, ci], k[co, ci], mode="same")
                outs.append(row)
            return float(((np.stack(outs) - tgt) ** 2).sum())

        (gk,) = grad_of(
            lambda k: ad.mse_loss(ad.conv1d(Tensor(sig), k), Tensor(tgt)), ker)
        fd = finite_difference_grad(loss_np, ker.copy(), step=1e-6)
        assert rel_err(gk, fd) < 1e-6

    def test_signal_gradient_matches_fd(self, rng):
        sig = rng.uniform(-1, 1, (3, 8))
        ker = rng.uniform(-1, 1, (2, 3, 5))
        w = rng.uniform(-1, 1, (2, 8))

        (gs,) = grad_of(lambda s: ad.dot(ad.conv1d(s, Tensor(ker)), Tensor(w)), sig)

        def loss_np(s):
            out = ad.conv1d(Tensor(s), Tensor(ker)).data
            return float((out * w).sum())

        fd = finite_difference_grad(loss_np, sig.copy(), step=1e-6)
        assert rel_err(gs, fd) < 1e-6


class TestActivations:
    def test_relu_values(self):
        assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        (g,) = grad_of(lambda x: ad.sum_all(ad.relu(x)), [0.0, -1.0, 3.0])
        assert np.array_equal(g, [0.0, 0.0, 1.0])

    def test_tanh_at_zero(self):
        (g,) = grad_of(lambda x: ad.sum_all(ad.tanh(x)), [0.0])
        assert ad.tanh(Tensor([0.0])).data[0] == 0.0
        assert g[0] == pytest.approx(1.0)

    def test_tanh_derivative_vs_fd(self, rng):
        x = rng.uniform(-1, 1, 7)
        (g,) = grad_of(lambda t: ad.sum_all(ad.tanh(t)), x)
        fd = finite_difference_grad(lambda a: float(np.tanh(a).sum()), x.copy(), step=1e-6)
        assert rel_err(g, fd) < 1e-8


class TestMseLoss:
    def test_equal_inputs_zero(self, rng):
        a = rng.standard_normal(5)
        assert ad.mse_loss(Tensor(a), Tensor(a.copy())).item() == 0.0

    def test_three_four_five(self):
        assert ad.mse_loss(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 25.0

    def test_grad_is_twice_difference(self, rng):
        a = rng.uniform(-1, 1, 4)
        b = rng.uniform(-1, 1, 4)
        (ga,) = grad_of(lambda t: ad.mse_loss(t, Tensor(b)), a)
        assert rel_err(ga, 2 * (a - b)) < 1e-12
        fd = finite_difference_grad(lambda t: float(((t - b) ** 2).sum()), a.copy())
        assert rel_err(ga, fd) < 1e-7


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grad_of(lambda v: ad.sum_all(v), np.zeros(6))
        assert np.array_equal(g, np.ones(6))

    def test_ten_step_linear_recursion(self):
        eta = 0.25
        (g,) = grad_of(
            lambda x0: ad.sum_all(_chain(x0, eta, 10)), [1.0])
        assert g[0] == pytest.approx((1 - eta) ** 10, rel=1e-12)

    def test_fanout_gradients_sum(self):
        (g,) = grad_of(lambda x: ad.add(ad.sum_all(x), ad.sum_all(x)), [2.0, 3.0])
        assert np.array_equal(g, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = ad.scale(x, 2.0)
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_tape_cannot_be_replayed(self):
        with Tape() as tape:
            x = Tensor([1.0], requires_grad=True)
            loss = ad.sum_all(x)
            tape.backward(loss)
            with pytest.raises(RuntimeError, match="consumed"):
                tape.backward(loss)

    def test_chain_against_hand_jacobians(self, rng):
        # 2x2 linear chain: loss = u . (B (A x)); grad = A^T B^T u
        a = rng.standard_normal((2, 2))
        b = rng.standard_normal((2, 2))
        u = rng.standard_normal(2)
        x = rng.standard_normal(2)
        (g,) = grad_of(
            lambda t: ad.dot(ad.matvec(Tensor(b), ad.matvec(Tensor(a), t)), Tensor(u)), x)
        assert rel_err(g, a.T @ b.T @ u) < 1e-12


def _chain(x, eta, steps):
    for _ in range(steps):
        x = ad.scale(x, 1 - eta)
    return x


PRIMITIVE_CASES = [
    ("add", lambda t: ad.sum_all(ad.mul(ad.add(t, Tensor(np.full(t.shape, 0.3))),
                                        Tensor(np.linspace(0.5, 1.0, t.size).reshape(t.shape)))), (4,)),
    ("sub", lambda t: ad.sum_all(ad.mul(ad.sub(Tensor(np.full(t.shape, 0.3)), t),
                                        Tensor(np.linspace(-1.0, 1.0, t.size).reshape(t.shape)))), (4,)),
    ("neg", lambda t: ad.sum_all(ad.mul(ad.neg(t),
                                        Tensor(np.linspace(0.2, 1.0, t.size).reshape(t.shape)))), (5,)),
    ("scale", lambda t: ad.sum_all(ad.scale(t, -1.7)), (3,)),
    ("tanh", lambda t: ad.sum_all(ad.tanh(t)), (6,)),
    ("reshape", lambda t: ad.sum_all(ad.mul(ad.reshape(t, (2, 3)),
                                            Tensor(np.arange(6.0).reshape(2, 3)))), (6,)),
    ("matmul", lambda t: ad.sum_all(ad.matmul(t, Tensor(np.linspace(-1, 1, 6).reshape(3, 2)))), (2, 3)),
    ("add_bias", lambda t: ad.sum_all(ad.mul(ad.add_bias(Tensor(np.ones((4, 2))), t),
                                             Tensor(np.arange(8.0).reshape(4, 2)))), (2,)),
    ("add_channel_bias", lambda t: ad.sum_all(
        ad.mul(ad.add_channel_bias(Tensor(np.ones((2, 3, 4))), t),
               Tensor(np.arange(24.0).reshape(2, 3, 4)))), (3,)),
    ("gd_update", lambda t: ad.sum_all(ad.mul(ad.gd_update(t, ad.tanh(t), 0.3),
                                              Tensor(np.linspace(0.2, 1.0, t.size).reshape(t.shape)))), (4,)),
]


@pytest.mark.parametrize("name,builder,shape", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, builder, shape, rng):
    x = rng.uniform(-1, 1, shape)
    (g,) = grad_of(builder, x)

    def loss_np(arr):
        return builder(Tensor(arr)).item()

    fd = finite_difference_grad(loss_np, x.copy(), step=1e-6)
    assert rel_err(g, fd) < 1e-5


def test_gd_update_noise_is_constant(rng):
    x = rng.standard_normal(4)
    u = rng.standard_normal(4)
    w = rng.standard_normal(4)
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        ut = Tensor(u, requires_grad=True)
        out = ad.gd_update(xt, ut, 0.5, noise=w)
        tape.backward(ad.sum_all(out))
    assert np.allclose(out.data, x - 0.5 * (u + w))
    assert np.array_equal(xt.grad, np.ones(4))
    assert np.array_equal(ut.grad, np.full(4, -0.5))


def test_repeat_run_is_bit_identical(rng):
    x = rng.standard_normal((3, 2))
    w = rng.standard_normal((2, 2))

    def run():
        with Tape() as tape:
            xt = Tensor(x.copy(), requires_grad=True)
            wt = Tensor(w.copy(), requires_grad=True)
            loss = ad.mse_loss(ad.tanh(ad.matmul(xt, wt)), Tensor(np.zeros((3, 2))))
            tape.backward(loss)
        return loss.item(), xt.grad.copy(), wt.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_ops_off_tape_do_not_record():
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = ad.scale(x, 2.0)
    assert out.requires_grad
    with Tape() as tape:
        assert len(tape) == 0
