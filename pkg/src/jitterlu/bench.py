"""Training-speed benchmark: steady-state items per second per scheme.

Every scheme runs the same batch counts on the same data and device; warmup
batches are excluded and throughput is summarized over several measurement
windows so jitter overhead and the adversarial-training slowdown can be
compared apples to apples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .linops import LinearOperator
from .nets import GradientNet
from .rng import stream
from .schemes import Adam, TrainingScheme, _scheme_step
from .unroll import UnrolledSolver


@dataclass
class BenchResult:
    scheme: str
    items_per_second: float
    std: float
    windows: list[float]
    batch_size: int
    batches_per_window: int


def bench_training_speed(schemes: dict[str, TrainingScheme], make_solver,
                         op: LinearOperator, dataset: Dataset, seed: int,
                         warmup_batches: int = 10, windows: int = 5,
                         batches_per_window: int = 10) -> dict[str, BenchResult]:
    """Measure realized training throughput for each scheme.

    ``make_solver(seed)`` builds a fresh solver so every scheme starts from
    identical weights. Identical batch counts per scheme keep the comparison
    a harness contract rather than a tuning choice.
    """
    results: dict[str, BenchResult] = {}
    n = len(dataset)
    for name, scheme in schemes.items():
        solver: UnrolledSolver = make_solver(seed)
        adam = Adam(solver.net.parameters(), scheme.learning_rate)
        shuffle_rng = stream(seed, "bench-shuffle", name)
        jitter_rng = stream(seed, "bench-jitter", name)
        eff_batch = min(n, scheme.batch_size)

        def one_batch():
            idx = shuffle_rng.permutation(n)[:eff_batch]
            _scheme_step(scheme, solver, op, dataset.x[idx], dataset.y[idx], jitter_rng)
            adam.step()
            adam.zero_grad()

        for _ in range(warmup_batches):
            one_batch()
        window_rates = []
        for _ in range(windows):
            t0 = time.perf_counter()
            for _ in range(batches_per_window):
                one_batch()
            dt = time.perf_counter() - t0
            window_rates.append(batches_per_window * eff_batch / dt)
        rates = np.asarray(window_rates)
        results[name] = BenchResult(name, float(rates.mean()), float(rates.std(ddof=1)),
                                    window_rates, eff_batch, batches_per_window)
    return results
