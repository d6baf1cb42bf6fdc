"""Linear forward models: apply, adjoint, and spectral-norm estimation.

Operators act on the trailing ``domain_shape`` axes of a tensor; any leading
axes are treated as batch. All operators are immutable after construction and
cache their largest AtA eigenvalue (``mu``) from power iteration.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream

POWER_ITERS = 200
POWER_TOL = 1e-10


class OperatorError(ValueError):
    pass


def ricker_wavelet(peak_frequency: float, dt: float, half_width: int) -> np.ndarray:
    """Zero-phase Ricker wavelet (1 - 2 pi^2 f^2 t^2) exp(-pi^2 f^2 t^2).

    Sampled at t = -half_width*dt ... +half_width*dt, peak value 1 at t = 0.
    """
    if peak_frequency <= 0:
        raise ValueError("peak_frequency must be positive")
    t = np.arange(-half_width, half_width + 1, dtype=np.float64) * dt
    a = (np.pi * peak_frequency * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


class LinearOperator:
    """Base class; subclasses implement plain-array apply/adjoint.

    ``apply_t``/``adjoint_t`` run through the autodiff tape so attacks can
    differentiate through the forward model.
    """

    domain_shape: tuple[int, ...]
    range_shape: tuple[int, ...]

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_t(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def adjoint_t(self, u: Tensor) -> Tensor:
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    @property
    def domain_size(self) -> int:
        return int(np.prod(self.domain_shape))

    @property
    def range_size(self) -> int:
        return int(np.prod(self.range_shape))

    def _check(self, shape: tuple[int, ...], expected: tuple[int, ...], what: str) -> None:
        nd = len(expected)
        if len(shape) < nd or tuple(shape[len(shape) - nd:]) != tuple(expected):
            raise OperatorError(
                f"{what}: trailing axes of {tuple(shape)} do not match operator shape {tuple(expected)}")

    @property
    def mu(self) -> float:
        """Cached largest eigenvalue of AtA."""
        return self._mu

    def _cache_mu(self) -> None:
        self._mu = spectral_bound(self)

    def as_matrix(self) -> np.ndarray:
        """Dense (range_size x domain_size) matrix; desk-scale probes only."""
        n = self.domain_size
        basis = np.eye(n).reshape((n,) + self.domain_shape)
        cols = self.apply(basis).reshape(n, self.range_size)
        return cols.T


class Identity(LinearOperator):
    def __init__(self, shape):
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        self.domain_shape = tuple(int(s) for s in shape)
        self.range_shape = self.domain_shape
        self._mu = 1.0

    def apply(self, x):
        self._check(np.shape(x), self.domain_shape, "apply")
        return np.asarray(x, dtype=np.float64)

    adjoint = apply

    def apply_t(self, x: Tensor) -> Tensor:
        self._check(x.shape, self.domain_shape, "apply")
        return x

    adjoint_t = apply_t

    def descriptor(self) -> dict:
        return {"kind": "identity", "shape": list(self.domain_shape)}


class DenseMatrix(LinearOperator):
    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise OperatorError(f"dense operator needs a 2-d matrix, got shape {values.shape}")
        self.values = values
        self.domain_shape = (values.shape[1],)
        self.range_shape = (values.shape[0],)
        self._m_t = Tensor(values)
        self._mt_t = Tensor(values.T.copy())
        self._cache_mu()

    def apply(self, x):
        self._check(np.shape(x), self.domain_shape, "apply")
        return np.asarray(x) @ self.values.T

    def adjoint(self, u):
        self._check(np.shape(u), self.range_shape, "adjoint")
        return np.asarray(u) @ self.values

    def apply_t(self, x: Tensor) -> Tensor:
        self._check(x.shape, self.domain_shape, "apply")
        if x.ndim == 1:
            return ad.matvec(self._m_t, x)
        return ad.matmul(x, self._mt_t)

    def adjoint_t(self, u: Tensor) -> Tensor:
        self._check(u.shape, self.range_shape, "adjoint")
        if u.ndim == 1:
            return ad.matvec(self._mt_t, u)
        return ad.matmul(u, self._m_t)

    def descriptor(self) -> dict:
        return {"kind": "dense", "values": self.values.tolist()}


class ConvolutionalToeplitz(LinearOperator):
    """Per-trace same-padded convolution with a source wavelet.

    Sections are (traces, T); each trace is convolved independently along
    time, so AtA is block diagonal with identical blocks and mu can be
    estimated on a single trace.
    """

    def __init__(self, wavelet: np.ndarray, traces: int, samples: int, meta: dict | None = None):
        wavelet = np.asarray(wavelet, dtype=np.float64)
        if wavelet.ndim != 1 or wavelet.size % 2 == 0:
            raise OperatorError(f"wavelet must be 1-d with odd length, got shape {wavelet.shape}")
        if np.all(wavelet == 0.0):
            raise OperatorError("degenerate all-zero wavelet")
        if samples <= wavelet.size:
            raise OperatorError(f"trace length {samples} must exceed wavelet length {wavelet.size}")
        self.wavelet = wavelet
        self.domain_shape = (int(traces), int(samples))
        self.range_shape = self.domain_shape
        self._meta = dict(meta or {})
        # conv1d is cross-correlation: correlating with the reversed wavelet
        # is convolution, and the adjoint correlates with the wavelet itself.
        self._k_fwd = Tensor(wavelet[::-1].copy().reshape(1, 1, -1))
        self._k_adj = Tensor(wavelet.copy().reshape(1, 1, -1))
        self._cache_mu()

    def _conv(self, x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        samples = self.domain_shape[1]
        rows = x.reshape(-1, samples)
        pad = kernel.size // 2
        xp = np.zeros((rows.shape[0], samples + 2 * pad))
        xp[:, pad:pad + samples] = rows
        win = np.lib.stride_tricks.sliding_window_view(xp, kernel.size, axis=1)
        return (win @ kernel).reshape(x.shape)

    def apply(self, x):
        self._check(np.shape(x), self.domain_shape, "apply")
        return self._conv(x, self.wavelet[::-1].copy())

    def adjoint(self, u):
        self._check(np.shape(u), self.range_shape, "adjoint")
        return self._conv(u, self.wavelet)

    def _conv_t(self, x: Tensor, kern: Tensor) -> Tensor:
        traces, samples = self.domain_shape
        rows = ad.reshape(x, (-1, 1, samples))
        out = ad.conv1d(rows, kern)
        return ad.reshape(out, x.shape)

    def apply_t(self, x: Tensor) -> Tensor:
        self._check(x.shape, self.domain_shape, "apply")
        return self._conv_t(x, self._k_fwd)

    def adjoint_t(self, u: Tensor) -> Tensor:
        self._check(u.shape, self.range_shape, "adjoint")
        return self._conv_t(u, self._k_adj)

    def _cache_mu(self) -> None:
        # Single-trace surrogate: AtA blocks are identical across traces.
        single = ConvSingleTrace(self.wavelet, self.domain_shape[1])
        self._mu = spectral_bound(single)

    def descriptor(self) -> dict:
        desc = {"kind": "conv_toeplitz", "traces": self.domain_shape[0],
                "samples": self.domain_shape[1]}
        if self._meta:
            desc.update(self._meta)
        else:
            desc["wavelet"] = self.wavelet.tolist()
        return desc


class ConvSingleTrace(LinearOperator):
    """One-trace helper used for spectral estimation of the Toeplitz blocks."""

    def __init__(self, wavelet: np.ndarray, samples: int):
        self.wavelet = np.asarray(wavelet, dtype=np.float64)
        self.domain_shape = (int(samples),)
        self.range_shape = self.domain_shape

    def _conv(self, x, kernel):
        pad = kernel.size // 2
        xp = np.pad(np.asarray(x, dtype=np.float64), pad)
        win = np.lib.stride_tricks.sliding_window_view(xp, kernel.size)
        return win @ kernel

    def apply(self, x):
        return self._conv(x, self.wavelet[::-1].copy())

    def adjoint(self, u):
        return self._conv(u, self.wavelet)


def spectral_bound(op: LinearOperator, iters: int = POWER_ITERS, tol: float = POWER_TOL,
                   seed: int = 0) -> float:
    """Largest eigenvalue of AtA by power iteration on a single sample.

    Deterministic given the seed; stops after ``iters`` rounds or once the
    relative change drops below ``tol``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if isinstance(op, Identity):
        return 1.0
    rng = stream(seed, "power-iteration")
    v = rng.standard_normal(op.domain_shape)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v = v / nv
    lam = 0.0
    for _ in range(iters):
        av = op.apply(v)
        new_lam = float(np.vdot(av, av))
        w = op.adjoint(av)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0  # degenerate zero operator
        v = w / nw
        if lam > 0.0 and abs(new_lam - lam) <= tol * lam:
            lam = new_lam
            break
        lam = new_lam
    return lam


def from_descriptor(desc: dict) -> LinearOperator:
    """Build an operator from its config/dataset descriptor."""
    kind = desc.get("kind")
    if kind == "identity":
        return Identity(tuple(desc["shape"]))
    if kind == "dense":
        return DenseMatrix(np.asarray(desc["values"], dtype=np.float64))
    if kind == "conv_toeplitz":
        if "wavelet" in desc:
            wavelet = np.asarray(desc["wavelet"], dtype=np.float64)
            meta = None
        else:
            wavelet = ricker_wavelet(desc["wavelet_freq"], desc["dt"], desc["half_width"])
            meta = {k: desc[k] for k in ("wavelet_freq", "dt", "half_width")}
        return ConvolutionalToeplitz(wavelet, desc["traces"], desc["samples"], meta=meta)
    raise OperatorError(f"unknown operator kind: {kind!r}")
