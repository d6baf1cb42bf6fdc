"""Command-line experiment driver.

Subcommands: datagen, train, eval, attack, sweep, verify, bench, report.
Every run writes into ``output_dir/run_id`` (timestamp + config hash unless
--run-id pins it): a canonical config echo, CSV/JSON outputs, and
checkpoints. Exit code 0 on success; failures print a machine-readable JSON
error to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datasets, linops, report as report_mod, theory
from .attacks import l2_pgd_attack
from .bench import bench_training_speed
from .checkpoint import load_checkpoint, load_into, rng_digest, save_checkpoint
from .config import ExperimentConfig, canonical_json, load_config
from .evaluate import (PerturbationSpec, best_sigma_per_epsilon, evaluate_solver,
                       sweep_jitter_variance)
from .nets import Dncnn1dArch, GradientNet, MlpArch
from .schemes import train as train_scheme
from .unroll import UnrollConfig, UnrolledSolver

SCHEMA_VERSION = 1


class CliError(RuntimeError):
    pass


def build_net(cfg: ExperimentConfig, seed: int) -> GradientNet:
    sec = cfg.net
    if sec.type == "mlp":
        arch = MlpArch(tuple(sec.widths), sec.activation)
    else:
        arch = Dncnn1dArch(sec.depth, sec.channels, sec.kernel_len, sec.activation)
    return GradientNet.build(arch, seed=seed + sec.seed_offset, role=sec.role)


def build_solver(cfg: ExperimentConfig, seed: int) -> UnrolledSolver:
    sol = cfg.solver
    ucfg = UnrollConfig(iterations=sol.iterations, step_size=sol.step_size,
                        variant=sol.variant, x0_rule=sol.x0_rule)
    return UnrolledSolver(build_net(cfg, seed), ucfg)


def build_datasets(cfg: ExperimentConfig, seed: int):
    """(train, test, ood) per the config; ood may be None."""
    ds = cfg.dataset
    if ds.kind == "file":
        train = datasets.Dataset.load(ds.train_path) if ds.train_path else None
        test = datasets.Dataset.load(ds.test_path) if ds.test_path else None
        ood = datasets.Dataset.load(ds.ood_path) if ds.ood_path else None
        if train is None or test is None:
            raise CliError("dataset.kind=file requires train_path and test_path")
        return train, test, ood
    if ds.kind == "toy":
        train, test = datasets.gen_toy(ds.n_train, ds.n_test, ds.sigma2_z, seed,
                                       per_coordinate_variance=ds.per_coordinate_variance)
        ood = datasets.gen_toy_ood(ds.ood_bias, ds.n_ood, ds.sigma2_z, seed,
                                   per_coordinate_variance=ds.per_coordinate_variance)
        return train, test, ood
    if ds.kind == "seismic":
        op_desc = cfg.operator
        common = dict(traces=op_desc["traces"], samples=op_desc["samples"],
                      sparsity=ds.sparsity, amp_range=(ds.amp_low, ds.amp_high),
                      wavelet_freq=op_desc["wavelet_freq"], dt=op_desc["dt"],
                      half_width=op_desc["half_width"], sigma2_z=ds.sigma2_z, seed=seed)
        train = datasets.gen_seismic(ds.n_train, split="train", **common)
        test = datasets.gen_seismic(ds.n_test, split="test", **common)
        ood = datasets.gen_seismic_ood(test, ds.layer_magnitude, ds.layer_time, seed)
        return train, test, ood
    raise CliError(f"unknown dataset kind {ds.kind!r}")


def _operator_for(cfg: ExperimentConfig, dataset) -> linops.LinearOperator:
    op = linops.from_descriptor(cfg.operator)
    if dataset is not None and tuple(dataset.sample_shape) != tuple(op.domain_shape):
        raise CliError(f"dataset sample shape {dataset.sample_shape} does not match "
                       f"operator domain {op.domain_shape}")
    return op


def _run_dir(cfg: ExperimentConfig, run_id: str | None, command: str) -> Path:
    if run_id is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_id = f"{stamp}-{command}-{cfg.config_hash()[:8]}"
    path = Path(cfg.output_dir) / run_id
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "config.json", "w") as fh:
        fh.write(canonical_json(cfg.to_dict()))
        fh.write("\n")
    return path


def _write_json(path: Path, payload: dict) -> None:
    def default(obj):
        if isinstance(obj, float) and np.isinf(obj):
            return "inf"
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return str(obj)

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def _sanitize(value):
    if isinstance(value, float) and np.isinf(value):
        return "inf"
    return value


def _write_loss_history(path: Path, history, deterministic: bool) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "wall_seconds"])
        for rec in history:
            wall = 0.0 if deterministic else rec.wall_seconds
            writer.writerow([rec.epoch, repr(rec.mean_loss), repr(wall)])


def cmd_datagen(args) -> int:
    cfg = load_config(args.config, args.set)
    run_dir = _run_dir(cfg, args.run_id, "datagen")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    train, test, ood = build_datasets(cfg, seed)
    _operator_for(cfg, train)
    train.save(run_dir / "train.dat")
    test.save(run_dir / "test.dat")
    if ood is not None:
        ood.save(run_dir / "ood.dat")
    print(f"datagen: wrote {len(train)} train / {len(test)} test samples to {run_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    run_dir = _run_dir(cfg, args.run_id, f"train-s{seed}")
    train_ds, _, _ = build_datasets(cfg, seed)
    op = _operator_for(cfg, train_ds)
    solver = build_solver(cfg, seed)
    scheme = cfg.scheme.to_scheme()
    history = train_scheme(scheme, solver, op, train_ds, seed)
    _write_loss_history(run_dir / "loss_history.csv", history, cfg.deterministic)
    echo = cfg.to_dict()
    echo["resolved_seed"] = seed
    save_checkpoint(run_dir / "checkpoint.ckpt", solver.net, echo,
                    rng_digest(seed, scheme.tag), [[r.epoch, r.mean_loss] for r in history])
    final = history[-1].mean_loss if history else float("nan")
    print(f"train[{scheme.tag}, seed {seed}]: {scheme.epochs} epochs, "
          f"final loss {final:.6g}, checkpoint in {run_dir}")
    return 0


def _load_solver(cfg: ExperimentConfig, ckpt_path: str) -> tuple[UnrolledSolver, dict]:
    ckpt = load_checkpoint(ckpt_path)
    seed = ckpt.training_config.get("resolved_seed", 0)
    solver = build_solver(cfg, int(seed))
    load_into(solver.net, ckpt)
    return solver, ckpt.training_config


def _eval_specs(cfg: ExperimentConfig, seed: int):
    ev = cfg.eval
    attack = None
    if ev.attack.epsilon > 0 and ev.attack.steps > 0:
        attack = PerturbationSpec(kind="worst_case", epsilon=ev.attack.epsilon,
                                  steps=ev.attack.steps, step_size=ev.attack.step_size,
                                  seed=seed)
    avg = None
    if ev.average_case.radius > 0 or ev.average_case.sigma_e2 > 0:
        avg = PerturbationSpec(kind="average_case", radius=ev.average_case.radius,
                               sigma_e2=ev.average_case.sigma_e2,
                               sampling=ev.average_case.sampling, seed=seed)
    gen = None
    if ev.generalization.shift is not None or ev.generalization.sigma_g2 > 0:
        shift = None if ev.generalization.shift is None else \
            np.asarray(ev.generalization.shift, dtype=np.float64)
        gen = PerturbationSpec(kind="generalization_shift", shift=shift,
                               sigma_g2=ev.generalization.sigma_g2, seed=seed)
    return attack, avg, gen


def _write_per_sample(path: Path, per_sample: dict[str, list[float]]) -> None:
    keys = sorted(per_sample)
    if not keys:
        return
    n = len(per_sample[keys[0]])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample"] + keys)
        for i in range(n):
            writer.writerow([i] + [repr(_sanitize(per_sample[k][i])) for k in keys])


def _write_toy_recons(path: Path, solver, op, test, attack_spec) -> None:
    rows = []
    recon = solver.reconstruct(test.y, op)
    for i in range(len(test)):
        rows.append(["truth", i, repr(test.x[i][0]), repr(test.x[i][1])])
        rows.append(["clean", i, repr(recon[i][0]), repr(recon[i][1])])
    if attack_spec is not None:
        e, _, _ = l2_pgd_attack(solver, op, test.x, test.y, attack_spec.epsilon,
                                attack_spec.steps, attack_spec.step_size)
        adv = solver.reconstruct(test.y + e, op)
        for i in range(len(test)):
            rows.append(["attacked", i, repr(adv[i][0]), repr(adv[i][1])])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "sample", "x0", "x1"])
        writer.writerows(rows)


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    run_dir = _run_dir(cfg, args.run_id, f"eval-s{seed}")
    _, test, ood = build_datasets(cfg, seed)
    op = _operator_for(cfg, test)
    solver, train_echo = _load_solver(cfg, args.checkpoint)
    attack, avg, gen = _eval_specs(cfg, seed)
    rep = evaluate_solver(solver, op, cfg.task, test, seed, attack=attack, avg_case=avg,
                          generalization=gen, ood=ood, draws=cfg.eval.draws,
                          deterministic=cfg.deterministic)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "scheme": train_echo.get("scheme", {}).get("tag"),
        "aggregates": rep.aggregates(),
        "config_echo": cfg.to_dict(),
    }
    _write_json(run_dir / "report.json", payload)
    _write_per_sample(run_dir / "per_sample.csv", rep.per_sample)
    if cfg.task == "toy":
        _write_toy_recons(run_dir / "recons.csv", solver, op, test, attack)
    print(f"eval[seed {seed}]: clean mse {rep.clean_mse:.6g}, report in {run_dir}")
    return 0


def cmd_attack(args) -> int:
    cfg = load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    run_dir = _run_dir(cfg, args.run_id, f"attack-s{seed}")
    _, test, _ = build_datasets(cfg, seed)
    op = _operator_for(cfg, test)
    solver, train_echo = _load_solver(cfg, args.checkpoint)
    spec = cfg.eval.attack
    if spec.epsilon <= 0 or spec.steps <= 0:
        raise CliError("attack requires eval.attack.epsilon > 0 and steps > 0")
    e, attacked, clean = l2_pgd_attack(solver, op, test.x, test.y, spec.epsilon,
                                       spec.steps, spec.step_size)
    norms = np.linalg.norm(e.reshape(len(test), -1), axis=1)
    _write_json(run_dir / "attack.json", {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "scheme": train_echo.get("scheme", {}).get("tag"),
        "epsilon": spec.epsilon,
        "steps": spec.steps,
        "step_size": spec.step_size,
        "clean_mse": float(clean.mean()),
        "attacked_mse": float(attacked.mean()),
        "config_echo": cfg.to_dict(),
    })
    with open(run_dir / "attack_per_sample.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "clean_sq_error", "attacked_sq_error", "e_norm"])
        for i in range(len(test)):
            writer.writerow([i, repr(clean[i]), repr(attacked[i]), repr(norms[i])])
    print(f"attack[seed {seed}]: clean {clean.mean():.6g} -> attacked "
          f"{attacked.mean():.6g} in {run_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    run_dir = _run_dir(cfg, args.run_id, "sweep")
    sigma_grid = [float(s) for s in args.sigma2.split(",")]
    eps_grid = [float(s) for s in args.epsilons.split(",")]
    base_scheme = cfg.scheme

    def train_fn(sigma2, seed):
        train_ds, test_ds, ood_ds = build_datasets(cfg, seed)
        op = _operator_for(cfg, train_ds)
        solver = build_solver(cfg, seed)
        scheme = base_scheme.to_scheme()
        scheme.tag = "sgd_jitter" if cfg.solver.variant == "gd" else "spgd_jitter"
        scheme.jitter_sigma2 = sigma2
        train_scheme(scheme, solver, op, train_ds, seed)
        return solver, op, test_ds, ood_ds

    cells = sweep_jitter_variance(train_fn, eps_grid, sigma_grid, list(cfg.seeds),
                                  cfg.eval.attack.steps or 50,
                                  cfg.eval.attack.step_size or 0.05)
    with open(run_dir / "sweep_risk.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma2", "epsilon", "risk", "seed"])
        for c in cells:
            writer.writerow([repr(c.sigma2), repr(c.epsilon), repr(c.risk), c.seed])
    with open(run_dir / "sweep_accuracy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma2", "seed", "id_mse", "ood_mse"])
        seen = set()
        for c in cells:
            key = (c.sigma2, c.seed)
            if key not in seen:
                seen.add(key)
                writer.writerow([repr(c.sigma2), c.seed, repr(c.clean_mse), repr(c.ood_mse)])
    best = best_sigma_per_epsilon(cells)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "sigma2_grid": sigma_grid,
        "epsilon_grid": eps_grid,
        "best_sigma2": {f"eps={eps}/seed={seed}": sig
                        for (eps, seed), sig in sorted(best.items())},
        "config_echo": cfg.to_dict(),
    }
    _write_json(run_dir / "sweep_summary.json", summary)
    print(f"sweep: {len(cells)} cells in {run_dir}")
    return 0


def cmd_verify(args) -> int:
    results = theory.run_verification_suite(seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "seed": args.seed,
        "checks": results,
        "all_passed": all(r["passed"] for r in results),
    }
    _write_json(out_dir / "verify.json", payload)
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"[{status}] {r['check']}: deviation {r['deviation']:.3e} "
              f"(tolerance {r['tolerance']:.3e})")
    return 0 if payload["all_passed"] else 1


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    run_dir = _run_dir(cfg, args.run_id, "bench")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    train_ds, _, _ = build_datasets(cfg, seed)
    op = _operator_for(cfg, train_ds)
    base = cfg.scheme

    def variant(tag):
        s = base.to_scheme()
        s.tag = tag
        return s

    jitter_tag = "sgd_jitter" if cfg.solver.variant == "gd" else "spgd_jitter"
    schemes = {"mse": variant("mse"), "input_jitter": variant("input_jitter"),
               jitter_tag: variant(jitter_tag), "at": variant("at")}
    results = bench_training_speed(schemes, lambda s: build_solver(cfg, s), op,
                                   train_ds, seed, warmup_batches=args.warmup,
                                   windows=args.windows,
                                   batches_per_window=args.batches)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "items_per_second": {k: {"mean": v.items_per_second, "std": v.std,
                                 "windows": v.windows} for k, v in results.items()},
        "batch_size": next(iter(results.values())).batch_size,
        "config_echo": cfg.to_dict(),
    }
    _write_json(run_dir / "bench.json", payload)
    for name, res in results.items():
        print(f"bench[{name}]: {res.items_per_second:.1f} items/s (std {res.std:.1f})")
    return 0


def cmd_report(args) -> int:
    out = args.out or str(Path(args.root) / "report")
    manifest = report_mod.build_report(args.root, out)
    print(f"report: {manifest['runs_found']} runs aggregated into {out}")
    return 0


def _add_common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        p.add_argument("--config", required=True, help="path to the YAML config")
        p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--run-id", default=None, help="fixed run directory name")
    p.add_argument("--seed", type=int, default=None, help="override the first config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jitterlu",
                                     description="unrolled-solver training toolkit")
    parser.add_argument("--version", action="version", version=f"jitterlu {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate and persist datasets")
    _add_common(p)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train one scheme on one seed")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attack", help="worst-case attack on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("sweep", help="jitter-variance sweep")
    _add_common(p)
    p.add_argument("--sigma2", default="0,1e-3,1e-2,1e-1",
                   help="comma-separated jitter variances")
    p.add_argument("--epsilons", default="0.01", help="comma-separated attack radii")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run the theory verification suite")
    p.add_argument("--out", default="runs/verify")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="training-speed benchmark across schemes")
    _add_common(p)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--windows", type=int, default=5)
    p.add_argument("--batches", type=int, default=10)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("report", help="aggregate run directories into tables and figures")
    p.add_argument("--root", default="runs")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # structured failure for scripting
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
