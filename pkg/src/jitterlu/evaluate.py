"""Evaluation harness: robustness and generalization risks plus quality metrics.

Three risks from the training-scheme analysis are estimated here:
average-case robustness (random measurement perturbations), worst-case
robustness (projected-gradient attacks, shared with adversarial training),
and the generalization risk against a shifted ground truth observed through
the forward model. PSNR uses the ground-truth dynamic range of the split as
its peak; SSIM is the uniform-window variant for 2-d sections.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import l2_pgd_attack, worst_case_attack
from .datasets import Dataset
from .linops import LinearOperator
from .rng import stream
from .unroll import UnrolledSolver


@dataclass
class PerturbationSpec:
    kind: str  # worst_case | average_case | generalization_shift
    epsilon: float = 0.0
    steps: int = 0
    step_size: float = 0.0
    radius: float = 0.0
    sigma_e2: float = 0.0
    sampling: str = "uniform_ball"  # or "gaussian"
    sigma_g2: float = 0.0
    shift: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        kinds = ("worst_case", "average_case", "generalization_shift")
        if self.kind not in kinds:
            raise ValueError(f"kind must be one of {kinds}")
        for name in ("epsilon", "radius", "sigma_e2", "sigma_g2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def per_sample_mse(solver: UnrolledSolver, op: LinearOperator, x: np.ndarray,
                   y: np.ndarray) -> np.ndarray:
    """Squared l2 error per sample (summed over coordinates)."""
    recon = solver.reconstruct(y, op)
    return ((recon - x).reshape(x.shape[0], -1) ** 2).sum(axis=1)


def _draw_measurement_noise(rng, shape, m, spec: PerturbationSpec) -> np.ndarray:
    if spec.sampling == "gaussian":
        return rng.standard_normal(shape) * np.sqrt(spec.sigma_e2 / m)
    if spec.sampling == "uniform_ball":
        u = rng.standard_normal(shape)
        flat = u.reshape(shape[0], -1)
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        radii = spec.radius * rng.random(shape[0]) ** (1.0 / m)
        flat *= np.divide(radii[:, None], norms, out=np.zeros_like(norms), where=norms > 0)
        return flat.reshape(shape)
    raise ValueError(f"unknown sampling {spec.sampling!r}")


def avg_case_risk(solver: UnrolledSolver, op: LinearOperator, dataset: Dataset,
                  spec: PerturbationSpec, draws: int = 16) -> tuple[float, float]:
    """Monte-Carlo E ||x - H(y + e)||^2 over random measurement perturbations.

    Returns (mean, standard error over draws). Zero-magnitude specs reduce to
    clean test MSE with zero error bar.
    """
    if spec.kind != "average_case":
        raise ValueError("spec.kind must be average_case")
    x, y = dataset.x, dataset.y
    if (spec.sampling == "gaussian" and spec.sigma_e2 == 0.0) or \
       (spec.sampling == "uniform_ball" and spec.radius == 0.0):
        return float(per_sample_mse(solver, op, x, y).mean()), 0.0
    m = op.range_size
    rng = stream(spec.seed, "avg-case")
    means = np.zeros(draws)
    for d in range(draws):
        e = _draw_measurement_noise(rng, y.shape, m, spec)
        means[d] = per_sample_mse(solver, op, x, y + e).mean()
    stderr = means.std(ddof=1) / np.sqrt(draws) if draws > 1 else 0.0
    return float(means.mean()), float(stderr)


def generalization_risk(solver: UnrolledSolver, op: LinearOperator, dataset: Dataset,
                        spec: PerturbationSpec, draws: int = 16) -> tuple[float, float]:
    """E ||x + g - H(y + A g)||^2: the shifted truth observed consistently.

    Supports a fixed shift vector (single pass) or Gaussian shifts with
    E||g||^2 = sigma_g2 (Monte Carlo).
    """
    if spec.kind != "generalization_shift":
        raise ValueError("spec.kind must be generalization_shift")
    x, y = dataset.x, dataset.y
    if spec.shift is not None:
        g = np.broadcast_to(np.asarray(spec.shift, dtype=np.float64), x.shape[1:])
        gb = np.broadcast_to(g, x.shape)
        err = per_sample_mse(solver, op, x + gb, y + op.apply(gb))
        return float(err.mean()), 0.0
    if spec.sigma_g2 == 0.0:
        return float(per_sample_mse(solver, op, x, y).mean()), 0.0
    n = op.domain_size
    rng = stream(spec.seed, "generalization")
    means = np.zeros(draws)
    for d in range(draws):
        g = rng.standard_normal(x.shape) * np.sqrt(spec.sigma_g2 / n)
        means[d] = per_sample_mse(solver, op, x + g, y + op.apply(g)).mean()
    stderr = means.std(ddof=1) / np.sqrt(draws) if draws > 1 else 0.0
    return float(means.mean()), float(stderr)


def psnr(x_hat: np.ndarray, x: np.ndarray, peak: float) -> float:
    """10 log10(peak^2 / per-element MSE); inf when the error is exactly zero."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x_hat - x) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def ssim2d(x_hat: np.ndarray, x: np.ndarray, dynamic_range: float,
           window: int = 8) -> float:
    """Mean SSIM over all window x window patches (uniform weighting)."""
    if x_hat.shape != x.shape or x_hat.ndim != 2:
        raise ValueError("ssim2d expects two equal-shape 2-d arrays")
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_a = _window_mean(x_hat, window)
    mu_b = _window_mean(x, window)
    e_aa = _window_mean(x_hat * x_hat, window)
    e_bb = _window_mean(x * x, window)
    e_ab = _window_mean(x_hat * x, window)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
               ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def _window_mean(img: np.ndarray, window: int) -> np.ndarray:
    # integral-image mean over all fully interior windows, stride 1
    s = np.cumsum(np.cumsum(img, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    total = (s[window:, window:] - s[:-window, window:]
             - s[window:, :-window] + s[:-window, :-window])
    return total / (window * window)


@dataclass
class EvalReport:
    """Aggregate and per-sample evaluation results for one solver."""

    task: str
    seed: int
    peak: float
    clean_mse: float
    clean_psnr: float
    clean_ssim: float | None
    attacked_mse: float | None
    attacked_psnr: float | None
    attacked_ssim: float | None
    avg_case_mse: float | None
    avg_case_stderr: float | None
    generalization_mse: float | None
    ood_mse: float | None
    ood_psnr: float | None
    ood_ssim: float | None
    wall_seconds: float
    per_sample: dict[str, list[float]] = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out = {}
        for key, val in self.__dict__.items():
            if key in ("per_sample", "config_echo"):
                continue
            if isinstance(val, float) and np.isinf(val):
                val = "inf"
            out[key] = val
        return out


def _mean_psnr_ssim(recon: np.ndarray, x: np.ndarray, peak: float, use_ssim: bool):
    n = x.shape[0]
    sq = ((recon - x).reshape(n, -1) ** 2).sum(axis=1)
    psnrs = [psnr(recon[i], x[i], peak) for i in range(n)]
    ssims = [ssim2d(recon[i], x[i], peak) for i in range(n)] if use_ssim else None
    return sq, psnrs, ssims


def dataset_peak(dataset: Dataset) -> float:
    """PSNR peak: the ground-truth dynamic range of the split (fallback 1)."""
    spread = float(dataset.x.max() - dataset.x.min())
    return spread if spread > 0 else 1.0


def evaluate_solver(solver: UnrolledSolver, op: LinearOperator, task: str,
                    test: Dataset, seed: int,
                    attack: PerturbationSpec | None = None,
                    avg_case: PerturbationSpec | None = None,
                    generalization: PerturbationSpec | None = None,
                    ood: Dataset | None = None,
                    draws: int = 16,
                    peak: float | None = None,
                    deterministic: bool = True) -> EvalReport:
    """Run the full evaluation battery on one trained solver."""
    t0 = time.perf_counter()
    peak = dataset_peak(test) if peak is None else peak
    use_ssim = test.x.ndim == 3
    per_sample: dict[str, list[float]] = {}

    recon = solver.reconstruct(test.y, op)
    sq, psnrs, ssims = _mean_psnr_ssim(recon, test.x, peak, use_ssim)
    per_sample["clean_sq_error"] = [float(v) for v in sq]
    per_sample["clean_psnr"] = [float(v) for v in psnrs]
    if ssims is not None:
        per_sample["clean_ssim"] = [float(v) for v in ssims]
    clean_mse = float(sq.mean())
    clean_psnr = psnr(recon, test.x, peak)
    clean_ssim = float(np.mean(ssims)) if ssims is not None else None

    attacked_mse = attacked_psnr = attacked_ssim = None
    if attack is not None:
        e, attacked_sq, _ = l2_pgd_attack(solver, op, test.x, test.y, attack.epsilon,
                                          attack.steps, attack.step_size)
        recon_adv = solver.reconstruct(test.y + e, op)
        attacked_mse = float(attacked_sq.mean())
        attacked_psnr = psnr(recon_adv, test.x, peak)
        per_sample["attacked_sq_error"] = [float(v) for v in attacked_sq]
        if use_ssim:
            attacked_ssim = float(np.mean([ssim2d(recon_adv[i], test.x[i], peak)
                                           for i in range(len(test))]))

    avg_mse = avg_stderr = None
    if avg_case is not None:
        avg_mse, avg_stderr = avg_case_risk(solver, op, test, avg_case, draws=draws)

    gen_mse = None
    if generalization is not None:
        gen_mse, _ = generalization_risk(solver, op, test, generalization, draws=draws)

    ood_mse = ood_psnr = ood_ssim = None
    if ood is not None:
        recon_ood = solver.reconstruct(ood.y, op)
        sq_o, _, ssims_o = _mean_psnr_ssim(recon_ood, ood.x, peak, use_ssim)
        ood_mse = float(sq_o.mean())
        ood_psnr = psnr(recon_ood, ood.x, peak)
        ood_ssim = float(np.mean(ssims_o)) if ssims_o is not None else None
        per_sample["ood_sq_error"] = [float(v) for v in sq_o]

    wall = 0.0 if deterministic else time.perf_counter() - t0
    return EvalReport(task=task, seed=seed, peak=peak, clean_mse=clean_mse,
                      clean_psnr=clean_psnr, clean_ssim=clean_ssim,
                      attacked_mse=attacked_mse, attacked_psnr=attacked_psnr,
                      attacked_ssim=attacked_ssim, avg_case_mse=avg_mse,
                      avg_case_stderr=avg_stderr, generalization_mse=gen_mse,
                      ood_mse=ood_mse, ood_psnr=ood_psnr, ood_ssim=ood_ssim,
                      wall_seconds=wall, per_sample=per_sample)


@dataclass
class SweepCell:
    sigma2: float
    seed: int
    epsilon: float
    risk: float
    clean_mse: float
    ood_mse: float
    failed: bool = False


def sweep_jitter_variance(train_fn, eval_epsilons: list[float], sigma2_grid: list[float],
                          seeds: list[int], attack_steps: int,
                          attack_step_size: float) -> list[SweepCell]:
    """Train one solver per (sigma2, seed) and record worst-case risk per epsilon.

    ``train_fn(sigma2, seed)`` must return (solver, op, test_dataset,
    ood_dataset); training failures are recorded per cell without aborting
    the sweep.
    """
    cells: list[SweepCell] = []
    for seed in seeds:
        for sigma2 in sigma2_grid:
            try:
                solver, op, test, ood = train_fn(sigma2, seed)
            except Exception:
                for eps in eval_epsilons:
                    cells.append(SweepCell(sigma2, seed, eps, float("nan"), float("nan"),
                                           float("nan"), failed=True))
                continue
            clean = float(per_sample_mse(solver, op, test.x, test.y).mean())
            ood_mse = float(per_sample_mse(solver, op, ood.x, ood.y).mean())
            for eps in eval_epsilons:
                if eps == 0.0:
                    risk = clean
                else:
                    _, attacked, _ = l2_pgd_attack(solver, op, test.x, test.y, eps,
                                                   attack_steps, attack_step_size)
                    risk = float(attacked.mean())
                cells.append(SweepCell(sigma2, seed, eps, risk, clean, ood_mse))
    return cells


def best_sigma_per_epsilon(cells: list[SweepCell]) -> dict[tuple[float, int], float]:
    """argmin over sigma2 of the recorded risk, keyed by (epsilon, seed)."""
    best: dict[tuple[float, int], tuple[float, float]] = {}
    for c in cells:
        if c.failed or not np.isfinite(c.risk):
            continue
        key = (c.epsilon, c.seed)
        if key not in best or c.risk < best[key][1]:
            best[key] = (c.sigma2, c.risk)
    return {k: v[0] for k, v in best.items()}
