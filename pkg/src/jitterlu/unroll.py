"""Loop-unrolled solvers: gradient-descent and proximal-gradient variants.

The solver runs K fixed iterations of

    GD:  x_{k+1} = x_k - eta * (At(A x_k - y) + f(x_k) + w_{k+1})
    PGD: x_{k+1} = prox(x_k - eta * (At(A x_k - y) + w_{k+1}))

with one fresh jitter draw per executed iteration (never at x_0) when a
schedule is supplied, and none at all during inference. The whole loop runs
on the autodiff tape, so gradients reach the network weights, the
measurement y, and any attack perturbation folded into y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linops import LinearOperator
from .nets import GradientNet

VARIANTS = ("gd", "pgd")
X0_RULES = ("adjoint", "zero")


class DivergenceError(RuntimeError):
    """Non-finite iterate detected mid-trajectory."""

    def __init__(self, iteration: int, context: str = ""):
        msg = f"solver diverged at iteration {iteration}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)
        self.iteration = iteration


@dataclass(frozen=True)
class UnrollConfig:
    iterations: int
    step_size: float
    variant: str = "gd"
    x0_rule: str = "adjoint"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.x0_rule not in X0_RULES:
            raise ValueError(f"x0_rule must be one of {X0_RULES}, got {self.x0_rule!r}")


class JitterSchedule:
    """Per-iteration jitter variances sigma2[k] with E||w_k||^2 = sigma2[k].

    Draws are zero-mean Gaussian with per-coordinate variance sigma2[k] / n,
    where n is the signal dimension of one sample; independent across
    iterations and samples.
    """

    def __init__(self, sigma2):
        arr = np.asarray(sigma2, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("schedule must be a 1-d list of variances")
        if np.any(arr < 0):
            raise ValueError("jitter variances must be >= 0")
        self.sigma2 = arr

    @classmethod
    def constant(cls, sigma2: float, iterations: int) -> "JitterSchedule":
        return cls(np.full(iterations, float(sigma2)))

    def __len__(self) -> int:
        return self.sigma2.size

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.sigma2 == 0.0))

    def draw(self, rng: np.random.Generator, shape: tuple[int, ...], n: int) -> np.ndarray:
        """One (K, *shape) block of noise, a single generator call."""
        draws = rng.standard_normal((len(self),) + tuple(shape))
        scales = np.sqrt(self.sigma2 / n)
        return draws * scales.reshape((-1,) + (1,) * len(shape))


@dataclass
class Trajectory:
    """Recorded iterates x_0..x_K plus the injected noise, if any."""

    iterates: list[Tensor]
    noises: np.ndarray | None
    data_fidelity: list[float]
    f_values: list[np.ndarray] | None = None
    r_values: list[float] | None = None

    @property
    def final(self) -> Tensor:
        return self.iterates[-1]

    def __len__(self) -> int:
        return len(self.iterates)


def _initial_iterate(y: Tensor, op: LinearOperator, cfg: UnrollConfig) -> Tensor:
    if cfg.x0_rule == "adjoint":
        return op.adjoint_t(y)
    lead = y.shape[:len(y.shape) - len(op.range_shape)]
    return Tensor(np.zeros(lead + op.domain_shape))


def _prepare_noise(jitter, rng, cfg, x_shape, n):
    if jitter is None or jitter.is_zero:
        # All-zero schedules are exactly jitter-off, bit for bit.
        return None
    if len(jitter) != cfg.iterations:
        raise ValueError(f"schedule length {len(jitter)} != iterations {cfg.iterations}")
    if rng is None:
        raise ValueError("a jitter schedule needs an rng stream")
    return jitter.draw(rng, x_shape, n)


def _check_finite(x: Tensor, k: int) -> None:
    if not np.isfinite(x.data).all():
        raise DivergenceError(k)


def gd_unroll(y: Tensor, op: LinearOperator, net: GradientNet, cfg: UnrollConfig,
              jitter: JitterSchedule | None = None, rng: np.random.Generator | None = None,
              record_f: bool = False) -> Trajectory:
    """Unrolled gradient descent with the learned gradient inside the update."""
    x = _initial_iterate(y, op, cfg)
    noise = _prepare_noise(jitter, rng, cfg, x.shape, op.domain_size)
    eta = cfg.step_size
    iterates = [x]
    fvals: list[np.ndarray] | None = [] if record_f else None
    fidelity = []
    for k in range(cfg.iterations):
        residual = ad.sub(op.apply_t(x), y)
        fidelity.append(0.5 * float(np.vdot(residual.data, residual.data)))
        grad_data = op.adjoint_t(residual)
        f_out = net.forward(x)
        if fvals is not None:
            fvals.append(f_out.data)
        update = ad.add(grad_data, f_out)
        x = ad.gd_update(x, update, eta, None if noise is None else noise[k])
        _check_finite(x, k + 1)
        iterates.append(x)
    residual = op.apply(x.data) - y.data
    fidelity.append(0.5 * float(np.vdot(residual, residual)))
    return Trajectory(iterates, noise, fidelity, fvals)


def pgd_unroll(y: Tensor, op: LinearOperator, net: GradientNet, cfg: UnrollConfig,
               jitter: JitterSchedule | None = None, rng: np.random.Generator | None = None,
               record_f: bool = False) -> Trajectory:
    """Unrolled proximal gradient descent; jitter lands inside the prox input."""
    if net.role != "proximal":
        raise ValueError(f"pgd unrolling needs a proximal-role net, got {net.role!r}")
    x = _initial_iterate(y, op, cfg)
    noise = _prepare_noise(jitter, rng, cfg, x.shape, op.domain_size)
    eta = cfg.step_size
    iterates = [x]
    fvals: list[np.ndarray] | None = [] if record_f else None
    fidelity = []
    for k in range(cfg.iterations):
        residual = ad.sub(op.apply_t(x), y)
        fidelity.append(0.5 * float(np.vdot(residual.data, residual.data)))
        grad_data = op.adjoint_t(residual)
        pre = ad.gd_update(x, grad_data, eta, None if noise is None else noise[k])
        x = net.forward(pre)
        if fvals is not None:
            fvals.append(x.data)
        _check_finite(x, k + 1)
        iterates.append(x)
    residual = op.apply(x.data) - y.data
    fidelity.append(0.5 * float(np.vdot(residual, residual)))
    return Trajectory(iterates, noise, fidelity, fvals)


class UnrolledSolver:
    """H_theta: an unroll configuration plus the learned network."""

    def __init__(self, net: GradientNet, cfg: UnrollConfig):
        if cfg.variant == "pgd" and net.role != "proximal":
            raise ValueError("pgd solver requires a proximal-role net")
        if cfg.variant == "gd" and net.role != "gradient":
            raise ValueError("gd solver requires a gradient-role net")
        self.net = net
        self.cfg = cfg

    def run(self, y: Tensor, op: LinearOperator, jitter: JitterSchedule | None = None,
            rng: np.random.Generator | None = None, record_f: bool = False) -> Trajectory:
        fn = gd_unroll if self.cfg.variant == "gd" else pgd_unroll
        return fn(y, op, self.net, self.cfg, jitter=jitter, rng=rng, record_f=record_f)

    def reconstruct(self, y, op: LinearOperator) -> np.ndarray:
        """Inference-mode x_K: jitter is never injected at evaluation."""
        y_t = y if isinstance(y, Tensor) else Tensor(y)
        return self.run(y_t, op).final.data


def reconstruct(y, op: LinearOperator, net: GradientNet, cfg: UnrollConfig) -> np.ndarray:
    return UnrolledSolver(net, cfg).reconstruct(y, op)
