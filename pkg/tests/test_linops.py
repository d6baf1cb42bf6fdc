import numpy as np
import pytest

from jitterlu import autodiff as ad
from jitterlu.autodiff import Tape, Tensor, finite_difference_grad
from jitterlu.linops import (ConvolutionalToeplitz, DenseMatrix, Identity, OperatorError,
                             from_descriptor, ricker_wavelet, spectral_bound)

from conftest import rel_err


def operators(rng):
    wav = ricker_wavelet(25.0, 0.004, 8)
    return [
        Identity((6,)),
        DenseMatrix(rng.standard_normal((5, 7))),
        ConvolutionalToeplitz(wav, traces=3, samples=24),
        ConvolutionalToeplitz(rng.standard_normal(7), traces=2, samples=16),
    ]


class TestApplyAdjoint:
    def test_identity_values(self):
        op = Identity((2,))
        assert np.array_equal(op.apply(np.array([0.3, -0.1])), [0.3, -0.1])

    def test_dense_diag(self):
        op = DenseMatrix([[2.0, 0.0], [0.0, 3.0]])
        assert np.array_equal(op.apply(np.array([1.0, 1.0])), [2.0, 3.0])

    def test_delta_wavelet_is_identity_bit_exact(self, rng):
        op = ConvolutionalToeplitz(np.array([0.0, 1.0, 0.0]), traces=4, samples=12)
        x = rng.standard_normal((4, 12))
        assert np.array_equal(op.apply(x), x)
        assert np.array_equal(op.adjoint(x), x)

    def test_symmetric_wavelet_adjoint_equals_apply(self, rng):
        wav = ricker_wavelet(20.0, 0.004, 6)  # even function
        op = ConvolutionalToeplitz(wav, traces=2, samples=20)
        x = rng.standard_normal((2, 20))
        assert np.allclose(op.apply(x), op.adjoint(x), atol=1e-15)

    def test_adjoint_identity_100_probes(self, rng):
        for op in operators(rng):
            for _ in range(100):
                x = rng.standard_normal(op.domain_shape)
                u = rng.standard_normal(op.range_shape)
                lhs = float(np.vdot(op.apply(x), u))
                rhs = float(np.vdot(x, op.adjoint(u)))
                assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_dimension_mismatch(self, rng):
        op = DenseMatrix(rng.standard_normal((3, 4)))
        with pytest.raises(OperatorError):
            op.apply(np.zeros(3))
        with pytest.raises(OperatorError):
            op.adjoint(np.zeros(4))

    def test_batched_apply_matches_loop(self, rng):
        for op in operators(rng):
            batch = rng.standard_normal((5,) + op.domain_shape)
            stacked = np.stack([op.apply(batch[i]) for i in range(5)])
            assert np.allclose(op.apply(batch), stacked, atol=0)

    def test_tape_apply_matches_plain_and_differentiates(self, rng):
        for op in operators(rng):
            x = rng.standard_normal(op.domain_shape)
            u = rng.standard_normal(op.range_shape)
            with Tape() as tape:
                xt = Tensor(x, requires_grad=True)
                out = op.apply_t(xt)
                tape.backward(ad.dot(out, Tensor(u)))
            assert np.allclose(out.data, op.apply(x), atol=0)
            # d<Ax, u>/dx = At u
            assert rel_err(xt.grad, op.adjoint(u)) < 1e-12


class TestSpectralBound:
    def test_identity_is_exactly_one(self):
        assert spectral_bound(Identity((4,))) == 1.0
        assert Identity((4,)).mu == 1.0

    def test_diagonal(self):
        op = DenseMatrix(np.diag([2.0, 3.0]))
        assert op.mu == pytest.approx(9.0, rel=1e-9)

    def test_random_matrix_vs_eigendecomposition(self, rng):
        m = rng.standard_normal((8, 8))
        op = DenseMatrix(m)
        want = float(np.linalg.eigvalsh(m.T @ m).max())
        assert op.mu == pytest.approx(want, rel=1e-6)

    def test_toeplitz_vs_dense_materialization(self, rng):
        # the iteration cap (200) limits accuracy when the spectrum is tight
        op = ConvolutionalToeplitz(rng.standard_normal(5), traces=2, samples=12)
        a = op.as_matrix()
        want = float(np.linalg.eigvalsh(a.T @ a).max())
        assert op.mu == pytest.approx(want, rel=2e-5)
        assert op.mu <= want * (1 + 1e-12)  # power iteration approaches from below

    def test_mu_upper_envelope_with_slack(self, rng):
        for op in operators(rng):
            bound = op.mu * (1 + 1e-4)
            for _ in range(50):
                v = rng.standard_normal(op.domain_shape)
                ratio = float(np.vdot(op.apply(v), op.apply(v)) / np.vdot(v, v))
                assert ratio <= bound

    def test_iters_validated(self):
        with pytest.raises(ValueError):
            spectral_bound(DenseMatrix(np.eye(2)), iters=0)


class TestRicker:
    def test_peak_is_one_at_center(self):
        w = ricker_wavelet(25.0, 0.004, 10)
        assert w[10] == 1.0

    def test_even_symmetry(self):
        w = ricker_wavelet(30.0, 0.002, 12)
        assert np.array_equal(w, w[::-1])

    def test_zero_crossings(self):
        f, dt = 25.0, 1e-5
        t_cross = 1.0 / (np.pi * f * np.sqrt(2.0))
        idx = int(round(t_cross / dt))
        w = ricker_wavelet(f, dt, idx + 5)
        center = idx + 5
        # sign change brackets the analytic root on each side
        assert w[center + idx] * w[center + idx + 1] <= 0.0
        assert w[center - idx] * w[center - idx - 1] <= 0.0

    def test_rejects_nonpositive_frequency(self):
        with pytest.raises(ValueError):
            ricker_wavelet(0.0, 0.004, 5)


class TestDescriptors:
    def test_roundtrip(self, rng):
        for op in operators(rng):
            rebuilt = from_descriptor(op.descriptor())
            x = rng.standard_normal(op.domain_shape)
            assert np.allclose(rebuilt.apply(x), op.apply(x), atol=0)

    def test_ricker_descriptor_regenerates_wavelet(self):
        desc = {"kind": "conv_toeplitz", "traces": 2, "samples": 32,
                "wavelet_freq": 25.0, "dt": 0.004, "half_width": 6}
        op = from_descriptor(desc)
        assert np.array_equal(op.wavelet, ricker_wavelet(25.0, 0.004, 6))

    def test_unknown_kind(self):
        with pytest.raises(OperatorError):
            from_descriptor({"kind": "fourier"})
