"""Worst-case measurement attacks via projected gradient ascent on an l2 ball.

The attack differentiates the squared reconstruction error through the full
unrolled solver with respect to the perturbation e added to y. Steps follow
the normalized gradient direction and are projected back onto the epsilon
ball; e starts at zero and the best iterate per sample is kept, so the
attacked loss can never fall below the clean loss.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linops import LinearOperator
from .unroll import UnrolledSolver


def _per_sample_sq(err: np.ndarray, batch: int) -> np.ndarray:
    return (err.reshape(batch, -1) ** 2).sum(axis=1)


def l2_pgd_attack(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray, y: np.ndarray,
                  epsilon: float, steps: int, step_size: float
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched l2 attack. Returns (e_best, attacked_losses, clean_losses).

    x, y are (batch, *shape); each sample's perturbation is optimized and
    projected independently. Solver weights are frozen for the duration, so
    parameter gradient buffers stay untouched.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    batch = x.shape[0]
    clean = _per_sample_sq(solver.reconstruct(y, op) - x, batch)
    if epsilon == 0.0 or steps == 0:
        return np.zeros_like(y), clean.copy(), clean

    e = np.zeros_like(y)
    best_e = np.zeros_like(y)
    best_loss = clean.copy()
    x_const = Tensor(x)
    y_const = Tensor(y)
    with solver.net.frozen():
        for _ in range(steps):
            with ad.Tape() as tape:
                e_t = Tensor(e, requires_grad=True)
                y_adv = ad.add(y_const, e_t)
                traj = solver.run(y_adv, op)
                loss = ad.mse_loss(traj.final, x_const)
                per_sample = _per_sample_sq(traj.final.data - x, batch)
                tape.backward(loss)
            _update_best(best_e, best_loss, e, per_sample)
            g = e_t.grad.reshape(batch, -1)
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            direction = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
            e = e + step_size * direction.reshape(e.shape)
            e = _project_l2(e, epsilon, batch)
        final = _per_sample_sq(solver.reconstruct(y + e, op) - x, batch)
        _update_best(best_e, best_loss, e, final)
    return best_e, best_loss, clean


def _project_l2(e: np.ndarray, epsilon: float, batch: int) -> np.ndarray:
    flat = e.reshape(batch, -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    factor = np.minimum(1.0, np.divide(epsilon, norms, out=np.ones_like(norms),
                                       where=norms > 0))
    return (flat * factor).reshape(e.shape)


def _update_best(best_e: np.ndarray, best_loss: np.ndarray, e: np.ndarray,
                 loss: np.ndarray) -> None:
    improved = loss > best_loss
    if improved.any():
        best_e[improved] = e[improved]
        best_loss[improved] = loss[improved]


def worst_case_attack(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray,
                      y: np.ndarray, epsilon: float, steps: int, step_size: float,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Spec surface: best perturbations and their per-sample attacked losses.

    Deterministic regardless of seed because the ascent starts at e = 0; the
    seed parameter is kept for callers that pin one per evaluation.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(op.domain_shape)
    if single:
        x, y = x[None], np.asarray(y, dtype=np.float64)[None]
    e, attacked, _ = l2_pgd_attack(solver, op, x, y, epsilon, steps, step_size)
    if single:
        return e[0], attacked[0]
    return e, attacked
