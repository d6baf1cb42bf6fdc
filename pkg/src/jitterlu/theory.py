"""Numerical certification of the solver algebra and bounds.

Covers four families of checks:

* exact trajectory expansions: the perturbed / jittered / attacked iterate
  equals the clean iterate plus geometric-weighted sums of learned-gradient
  deviations (and accumulated noise), verified to ~1e-9;
* the implicit-regularization sum and the per-sample decomposition of the
  jittered squared error around the clean trajectory;
* variance matching between an input shift and a constant jitter schedule;
* the gradient-Lipschitz bound on the lower-level objective and the SGD
  convergence bound under the prescribed step size, with a quadratic
  synthetic potential so that optimal values are closed-form.

All checks run in denoising mode (identity forward model) where required by
their derivations, and default to tanh networks, which are smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linops
from .autodiff import Tensor
from .linops import Identity, LinearOperator
from .nets import GradientNet, MlpArch, lipschitz_estimate
from .rng import stream
from .unroll import JitterSchedule, Trajectory, UnrollConfig, UnrolledSolver, gd_unroll

EXPANSION_RELTOL = 1e-9


@dataclass
class ExpansionCheck:
    kind: str
    iterations: int
    step_size: float
    max_deviation: float
    tolerance: float
    passed: bool
    per_iterate_deviation: list[float]


def _require_identity(op: LinearOperator) -> None:
    if not isinstance(op, Identity):
        raise ValueError("expansion identities are derived for the identity forward model")


def _geometric_f_sum(eta: float, f_clean: list[np.ndarray], f_other: list[np.ndarray],
                     upto: int) -> np.ndarray:
    """sum_{i=0}^{upto} eta (1-eta)^(upto-i) (f(x_i') - f(x_i)) with explicit powers."""
    total = np.zeros_like(f_clean[0])
    for i in range(upto + 1):
        total += eta * (1.0 - eta) ** (upto - i) * (f_clean[i] - f_other[i])
    return total


def _noise_accumulation(eta: float, noises: np.ndarray, upto: int) -> np.ndarray:
    """sum_{i=1}^{upto+1} eta (1-eta)^(upto+1-i) w_i, with w_0 = 0 by convention.

    ``noises[j]`` is the draw injected into the update that produces
    x_{j+1}, i.e. w_{j+1} in the derivation's indexing.
    """
    total = np.zeros_like(noises[0])
    for i in range(1, upto + 2):
        total += eta * (1.0 - eta) ** (upto + 1 - i) * noises[i - 1]
    return total


def _compare_expansion(kind: str, cfg: UnrollConfig, clean: Trajectory, other: Trajectory,
                       offsets, y_norm: float) -> ExpansionCheck:
    eta = cfg.step_size
    devs = []
    for k in range(cfg.iterations):
        expected = clean.iterates[k + 1].data + offsets(k)
        devs.append(float(np.max(np.abs(other.iterates[k + 1].data - expected))))
    max_dev = max(devs)
    tol = EXPANSION_RELTOL * (1.0 + y_norm)
    return ExpansionCheck(kind, cfg.iterations, eta, max_dev, tol, max_dev <= tol, devs)


def check_perturbation_expansion(solver: UnrolledSolver, op: LinearOperator, y: np.ndarray,
                                 shift: np.ndarray) -> ExpansionCheck:
    """Shifted-measurement trajectory versus its closed-form expansion.

    x_{k+1} = x_{k+1}' + g + sum_{i<=k} eta (1-eta)^(k-i) (f(x_i') - f(x_i)).
    """
    _require_identity(op)
    y = np.asarray(y, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    clean = gd_unroll(Tensor(y), op, solver.net, solver.cfg, record_f=True)
    shifted = gd_unroll(Tensor(y + shift), op, solver.net, solver.cfg, record_f=True)
    eta = solver.cfg.step_size

    def offsets(k: int) -> np.ndarray:
        return shift + _geometric_f_sum(eta, clean.f_values, shifted.f_values, k)

    return _compare_expansion("perturbation", solver.cfg, clean, shifted, offsets,
                              float(np.linalg.norm(y)))


def check_attack_expansion(solver: UnrolledSolver, op: LinearOperator, y: np.ndarray,
                           attack: np.ndarray) -> ExpansionCheck:
    """Identical algebra to the perturbation expansion with the attack vector."""
    check = check_perturbation_expansion(solver, op, y, attack)
    return ExpansionCheck("attack", check.iterations, check.step_size,
                          check.max_deviation, check.tolerance, check.passed,
                          check.per_iterate_deviation)


def check_sgd_expansion(solver: UnrolledSolver, op: LinearOperator, y: np.ndarray,
                        schedule: JitterSchedule, seed: int) -> ExpansionCheck:
    """Jittered trajectory versus clean trajectory plus f-sums minus noise sums."""
    _require_identity(op)
    y = np.asarray(y, dtype=np.float64)
    clean = gd_unroll(Tensor(y), op, solver.net, solver.cfg, record_f=True)
    rng = stream(seed, "sgd-expansion")
    noisy = gd_unroll(Tensor(y), op, solver.net, solver.cfg, jitter=schedule, rng=rng,
                      record_f=True)
    eta = solver.cfg.step_size
    if noisy.noises is None:  # all-zero schedule degenerates to the clean run
        zeros = np.zeros((solver.cfg.iterations,) + y.shape)
        noisy = Trajectory(noisy.iterates, zeros, noisy.data_fidelity, noisy.f_values)

    def offsets(k: int) -> np.ndarray:
        return (_geometric_f_sum(eta, clean.f_values, noisy.f_values, k)
                - _noise_accumulation(eta, noisy.noises, k))

    return _compare_expansion("sgd-jitter", solver.cfg, clean, noisy, offsets,
                              float(np.linalg.norm(y)))


def regularization_term(clean: Trajectory, noisy: Trajectory, eta: float) -> float:
    """Squared norm of the geometric f-deviation sum at the final iterate."""
    if clean.f_values is None or noisy.f_values is None:
        raise ValueError("trajectories must be recorded with f values")
    if len(clean.f_values) != len(noisy.f_values):
        raise ValueError(f"trajectory length mismatch: {len(clean.f_values)} vs "
                         f"{len(noisy.f_values)}")
    K = len(clean.f_values)
    s = _geometric_f_sum(eta, clean.f_values, noisy.f_values, K - 1)
    return float(np.vdot(s, s))


def risk_decomposition_residual(x_true: np.ndarray, clean: Trajectory, noisy: Trajectory,
                                eta: float) -> tuple[float, float]:
    """Check ||x - x_K^sgd||^2 against its four-term expansion.

    Returns (lhs, rhs) where rhs expands around the clean trajectory into the
    clean error, ths regularization sum s, and the accumulated noise n via
    x_K^sgd = x_K' + s - n.
    """
    K = len(clean.f_values)
    s = _geometric_f_sum(eta, clean.f_values, noisy.f_values, K - 1)
    n = _noise_accumulation(eta, noisy.noises, K - 1)
    err_clean = x_true - clean.iterates[-1].data
    lhs = float(np.vdot(x_true - noisy.iterates[-1].data,
                        x_true - noisy.iterates[-1].data))
    rhs = (float(np.vdot(err_clean, err_clean)) + float(np.vdot(s, s))
           + float(np.vdot(n, n))
           - 2.0 * float(np.vdot(err_clean, s)) + 2.0 * float(np.vdot(err_clean, n))
           - 2.0 * float(np.vdot(s, n)))
    return lhs, rhs


def matched_jitter_variance(sigma_g2: float, eta: float, k: int) -> float:
    """Constant jitter variance whose accumulated trajectory variance at
    index k equals sigma_g2: solves sum_{i=0}^k eta^2 (1-eta)^(2(k-i)) s = sigma_g2.

    For a K-iteration trajectory pass k = K - 1.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    if k < 0:
        raise ValueError("k must be >= 0")
    if eta == 1.0:
        return float(sigma_g2)
    rho = (1.0 - eta) ** 2
    return float(sigma_g2) * (1.0 - rho) / (eta ** 2 * (1.0 - rho ** (k + 1)))


def accumulated_jitter_variance(sigma_w2, eta: float, k: int) -> float:
    """Direct summation oracle for the variance-matching identity."""
    sig = np.asarray(sigma_w2, dtype=np.float64)
    if sig.ndim == 0:
        sig = np.full(k + 1, float(sig))
    total = 0.0
    for i in range(k + 1):
        total += eta ** 2 * (1.0 - eta) ** (2 * (k - i)) * float(sig[i])
    return total


class QuadraticPotential:
    """Synthetic r(x) = 0.5 x^T B x with symmetric PSD B, so the learned
    gradient is the linear field B x and every optimum is closed-form."""

    def __init__(self, b: np.ndarray):
        b = np.asarray(b, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ValueError("B must be square")
        if not np.allclose(b, b.T, atol=1e-12):
            raise ValueError("B must be symmetric")
        eigs = np.linalg.eigvalsh(b)
        if eigs.min() < -1e-12:
            raise ValueError("B must be positive semidefinite so inf r is finite")
        self.b = b
        self.lipschitz = float(max(abs(eigs.max()), abs(eigs.min())))

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def r(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ self.b @ x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.b @ x

    def as_net(self) -> GradientNet:
        """Wrap the linear field as a gradient-role net for the real unroll path."""
        return _LinearFieldNet(self.b)


class _LinearFieldNet(GradientNet):
    def __init__(self, b: np.ndarray):
        self._b = np.asarray(b, dtype=np.float64)
        self._b_t = Tensor(self._b.T.copy())
        super().__init__(MlpArch((b.shape[0], b.shape[0])), "gradient", [], seed=0)

    def forward(self, x: Tensor) -> Tensor:
        from . import autodiff as ad
        flat = ad.reshape(x, (-1, self._b.shape[0]))
        return ad.reshape(ad.matmul(flat, self._b_t), x.shape)


@dataclass
class LipschitzReport:
    lipschitz_estimate: float
    mu: float
    slack: float
    probes: int
    violations: int
    max_ratio: float
    bound: float
    passed: bool


def check_lipschitz_grad_objective(op: LinearOperator, net: GradientNet, probes: int,
                                   seed: int, slack: float = 0.05,
                                   input_scale: float = 1.0) -> LipschitzReport:
    """Probe ||grad F(x+d) - grad F(x)|| <= (L_hat (1+slack) + mu) ||d||.

    The measurement term cancels, so the difference is At A d + f(x+d) - f(x)
    and the check is independent of y.
    """
    l_hat = lipschitz_estimate(net, op.domain_shape, probes=64, seed=seed,
                               scale=input_scale)
    mu = op.mu
    bound_coeff = l_hat * (1.0 + slack) + mu
    rng = stream(seed, "lipschitz-F-probes")
    violations = 0
    max_ratio = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.domain_shape) * input_scale
        d = rng.standard_normal(op.domain_shape)
        d *= 10.0 ** rng.uniform(-3, 0) / max(np.linalg.norm(d), 1e-300)
        delta_data = op.adjoint(op.apply(d))
        delta_f = net.apply_array(x + d) - net.apply_array(x)
        ratio = float(np.linalg.norm(delta_data + delta_f) / np.linalg.norm(d))
        max_ratio = max(max_ratio, ratio)
        if ratio > bound_coeff:
            violations += 1
    return LipschitzReport(l_hat, mu, slack, probes, violations, max_ratio,
                           bound_coeff, violations == 0)


@dataclass
class ConvergenceCertificate:
    lipschitz: float
    mu: float
    l_max: float
    step_size: float
    f_x0: float
    inf_objective: float
    delta_f_star: float
    lhs: float
    lhs_stderr: float
    rhs: float
    argmin_iterate: int
    passed: bool


def check_convergence_bound(op: LinearOperator, potential: QuadraticPotential,
                            y: np.ndarray, iterations: int, trials: int, seed: int,
                            sigma_w2: float) -> ConvergenceCertificate:
    """Monte-Carlo check of the jittered-descent stationarity bound.

    Uses the prescribed step size eta = sqrt(2 / (L L_max K)). When the
    potential is identically zero (L = 0) the formula degenerates, so L is
    replaced by mu in both the step size and the bound.
    """
    y = np.asarray(y, dtype=np.float64)
    a_mat = op.as_matrix()
    ata = a_mat.T @ a_mat
    lip = potential.lipschitz
    mu = float(np.linalg.eigvalsh(ata).max())
    l_max = max(lip, mu)
    l_eff = lip if lip > 0 else mu
    if l_eff <= 0:
        raise ValueError("degenerate problem: both L and mu are zero")
    eta = float(np.sqrt(2.0 / (l_eff * l_max * iterations)))

    aty = a_mat.T @ y
    x_star = np.linalg.solve(ata + potential.b, aty)
    def objective(x):
        r = y - a_mat @ x
        return 0.5 * float(r @ r) + potential.r(x)
    inf_objective = objective(x_star)
    # inf of the data term alone: least-squares residual
    x_ls, *_ = np.linalg.lstsq(a_mat, y, rcond=None)
    inf_data = 0.5 * float(np.linalg.norm(y - a_mat @ x_ls) ** 2)
    delta_f_star = inf_objective - inf_data - 0.0  # inf r = 0 for PSD B
    # grad F(x) = AtA x - At y + B x
    m = ata + potential.b

    cfg = UnrollConfig(iterations=iterations, step_size=eta, variant="gd",
                       x0_rule="adjoint")
    solver = UnrolledSolver(potential.as_net(), cfg)
    schedule = JitterSchedule.constant(sigma_w2, iterations)
    sq_norms = np.zeros((trials, iterations))
    f_x0 = objective(aty)
    rng = stream(seed, "convergence-trials")
    for t in range(trials):
        traj = solver.run(Tensor(y), op, jitter=schedule, rng=rng)
        for k in range(iterations):
            g = m @ traj.iterates[k].data - aty
            sq_norms[t, k] = float(g @ g)
    means = sq_norms.mean(axis=0)
    k_min = int(np.argmin(means))
    lhs = float(means[k_min])
    stderr = float(sq_norms[:, k_min].std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    rhs = float(np.sqrt(2.0 * l_eff * l_max / iterations)
                * (2.0 * (f_x0 - inf_objective) + delta_f_star))
    passed = (lhs - 2.0 * stderr) <= rhs
    return ConvergenceCertificate(lip, mu, l_max, eta, f_x0, inf_objective,
                                  delta_f_star, lhs, stderr, rhs, k_min, passed)


def run_verification_suite(seed: int = 0) -> list[dict]:
    """The `verify` subcommand: every theory check with tolerances and deviations."""
    results: list[dict] = []
    op = Identity((2,))
    rng = stream(seed, "verify-suite")
    for K in (1, 2, 10):
        for eta in (0.1, 0.5, 1.0):
            net = GradientNet.build(MlpArch((2, 16, 16, 2)), seed=seed + K, role="gradient")
            cfg = UnrollConfig(iterations=K, step_size=eta)
            solver = UnrolledSolver(net, cfg)
            y = rng.standard_normal(2) * 0.5
            g = rng.standard_normal(2) * 0.01
            for check in (
                check_perturbation_expansion(solver, op, y, g),
                check_attack_expansion(solver, op, y, g),
                check_sgd_expansion(solver, op, y, JitterSchedule.constant(0.01, K),
                                    seed=seed),
            ):
                results.append({
                    "check": f"expansion/{check.kind}/K={K}/eta={eta}",
                    "deviation": check.max_deviation,
                    "tolerance": check.tolerance,
                    "passed": check.passed,
                })
    for eta in (0.1, 0.5, 1.0):
        for k in (0, 1, 10, 50):
            sw2 = matched_jitter_variance(1.0, eta, k)
            err = abs(accumulated_jitter_variance(sw2, eta, k) - 1.0)
            results.append({
                "check": f"variance-matching/eta={eta}/k={k}",
                "deviation": err,
                "tolerance": 1e-12,
                "passed": err <= 1e-12,
            })
    net = GradientNet.build(MlpArch((2, 32, 32, 2), activation="tanh"), seed=seed)
    lip = check_lipschitz_grad_objective(op, net, probes=1000, seed=seed)
    results.append({
        "check": "lipschitz-grad-objective/toy-tanh",
        "deviation": lip.max_ratio,
        "tolerance": lip.bound,
        "passed": lip.passed,
    })
    pot = QuadraticPotential(np.diag([1.5, 0.7, 0.3, 1.0]))
    y4 = stream(seed, "verify-convergence").standard_normal(4)
    for K in (10, 100):
        cert = check_convergence_bound(Identity((4,)), pot, y4, iterations=K,
                                       trials=200, seed=seed, sigma_w2=1e-3)
        results.append({
            "check": f"convergence-bound/K={K}",
            "deviation": cert.lhs,
            "tolerance": cert.rhs,
            "passed": cert.passed,
        })
    return results
