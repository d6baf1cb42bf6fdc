"""Training schemes for unrolled solvers.

Five schemes share one loop: plain MSE, adversarial training on worst-case
measurement perturbations, input jittering (one noise draw per sample, held
fixed across iterations), SGD jittering (fresh noise inside every gradient
update), and SPGD jittering (the proximal-variant analogue). Zero-magnitude
configurations of every scheme collapse onto the MSE path bit for bit, which
the degeneracy tests rely on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attacks import l2_pgd_attack
from .autodiff import Tensor
from .linops import LinearOperator
from .rng import stream
from .unroll import DivergenceError, JitterSchedule, UnrolledSolver

SCHEME_TAGS = ("mse", "at", "input_jitter", "sgd_jitter", "spgd_jitter")


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"training loss went non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainingScheme:
    tag: str
    epochs: int
    batch_size: int
    learning_rate: float
    epsilon: float = 0.0
    attack_steps: int = 1
    attack_step_size: float = 0.0
    sigma_w2: float = 0.0
    jitter_sigma2: float | list = 0.0

    def __post_init__(self):
        if self.tag not in SCHEME_TAGS:
            raise ValueError(f"unknown scheme tag {self.tag!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.epsilon < 0 or self.sigma_w2 < 0:
            raise ValueError("perturbation magnitudes must be >= 0")
        if self.tag == "at" and self.attack_steps < 1:
            raise ValueError("adversarial training needs attack_steps >= 1")

    def schedule(self, iterations: int) -> JitterSchedule:
        if isinstance(self.jitter_sigma2, (list, tuple, np.ndarray)):
            sched = JitterSchedule(self.jitter_sigma2)
            if len(sched) != iterations:
                raise ValueError(f"jitter schedule length {len(sched)} != K={iterations}")
            return sched
        return JitterSchedule.constant(float(self.jitter_sigma2), iterations)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_seconds: float


class Adam:
    """Bias-corrected Adam over a named parameter list."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def _batch_loss_backward(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray,
                         y_t: Tensor, jitter: JitterSchedule | None,
                         rng: np.random.Generator | None) -> float:
    batch = x.shape[0]
    with ad.Tape() as tape:
        traj = solver.run(y_t, op, jitter=jitter, rng=rng)
        loss = ad.scale(ad.mse_loss(traj.final, Tensor(x)), 1.0 / batch)
        tape.backward(loss)
    return loss.item()


def mse_step(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray,
             y: np.ndarray) -> float:
    """Eq.-style MSE risk on one batch: mean of per-sample squared l2 errors."""
    return _batch_loss_backward(solver, op, x, Tensor(y), None, None)


def at_step(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray, y: np.ndarray,
            epsilon: float, steps: int, step_size: float) -> float:
    """Worst-case attack on each sample, then one MSE step on the attacked batch."""
    if epsilon == 0.0:
        return mse_step(solver, op, x, y)
    e_best, _, _ = l2_pgd_attack(solver, op, x, y, epsilon, steps, step_size)
    return _batch_loss_backward(solver, op, x, Tensor(y + e_best), None, None)


def input_jitter_step(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray,
                      y: np.ndarray, sigma_w2: float, rng: np.random.Generator) -> float:
    """One fresh measurement perturbation per sample, fixed across iterations."""
    if sigma_w2 == 0.0:
        return mse_step(solver, op, x, y)
    m = op.range_size
    w = rng.standard_normal(y.shape) * np.sqrt(sigma_w2 / m)
    return _batch_loss_backward(solver, op, x, Tensor(y + w), None, None)


def sgd_jitter_step(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray,
                    y: np.ndarray, schedule: JitterSchedule,
                    rng: np.random.Generator) -> float:
    """Fresh per-iteration jitter inside every unrolled update; loss vs clean x."""
    if schedule.is_zero:
        return mse_step(solver, op, x, y)
    return _batch_loss_backward(solver, op, x, Tensor(y), schedule, rng)


spgd_jitter_step = sgd_jitter_step  # dispatch on the solver variant


def _scheme_step(scheme: TrainingScheme, solver: UnrolledSolver, op: LinearOperator,
                 x: np.ndarray, y: np.ndarray, jitter_rng) -> float:
    tag = scheme.tag
    if tag == "mse":
        return mse_step(solver, op, x, y)
    if tag == "at":
        return at_step(solver, op, x, y, scheme.epsilon, scheme.attack_steps,
                       scheme.attack_step_size)
    if tag == "input_jitter":
        return input_jitter_step(solver, op, x, y, scheme.sigma_w2, jitter_rng)
    schedule = scheme.schedule(solver.cfg.iterations)
    return sgd_jitter_step(solver, op, x, y, schedule, jitter_rng)


def train(scheme: TrainingScheme, solver: UnrolledSolver, op: LinearOperator,
          dataset, seed: int) -> list[EpochRecord]:
    """Run the configured scheme to completion; mutates the solver weights.

    Deterministic given the seed: shuffling and noise use separate derived
    streams, so zero-magnitude schemes replay the exact MSE trajectory.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if scheme.tag == "spgd_jitter" and solver.cfg.variant != "pgd":
        raise ValueError("spgd_jitter requires a pgd solver")
    x_all = dataset.x
    y_all = dataset.y
    n = len(dataset)
    shuffle_rng = stream(seed, "shuffle")
    jitter_rng = stream(seed, "jitter")
    adam = Adam(solver.net.parameters(), scheme.learning_rate)
    history: list[EpochRecord] = []
    for epoch in range(scheme.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, scheme.batch_size)):
            idx = order[start:start + scheme.batch_size]
            try:
                loss = _scheme_step(scheme, solver, op, x_all[idx], y_all[idx], jitter_rng)
            except DivergenceError as exc:
                raise TrainingDivergence(epoch, bi) from exc
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, bi)
            total += loss * idx.size
            adam.step()
            adam.zero_grad()
        history.append(EpochRecord(epoch, total / n, time.perf_counter() - t0))
    return history
