"""Aggregation of run directories into tables, scatter CSVs, and figures.

The report pass walks completed run directories, collects their JSON
reports, and writes: a scheme-by-scenario summary table (PSNR/SSIM cells),
a robustness/accuracy scatter CSV, and rendered PNG figures next to the
delimited output (loss curves, sweep curves, the robustness scatter, and a
2-d reconstruction scatter when toy per-sample points are available).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _load_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def collect_runs(root: Path) -> list[dict]:
    """Gather every run directory under ``root`` that carries a report or sweep."""
    runs = []
    for run_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        entry: dict = {"dir": run_dir, "name": run_dir.name}
        report = run_dir / "report.json"
        if report.exists():
            entry["report"] = _load_json(report)
        sweep = run_dir / "sweep_summary.json"
        if sweep.exists():
            entry["sweep"] = _load_json(sweep)
        loss_csv = run_dir / "loss_history.csv"
        if loss_csv.exists():
            entry["loss_csv"] = loss_csv
        recons = run_dir / "recons.csv"
        if recons.exists():
            entry["recons_csv"] = recons
        bench = run_dir / "bench.json"
        if bench.exists():
            entry["bench"] = _load_json(bench)
        if len(entry) > 2:
            runs.append(entry)
    return runs


def _fmt(v) -> str:
    if v is None:
        return ""
    return str(v)


def write_summary_table(runs: list[dict], out_path: Path) -> int:
    """Scheme-by-scenario table: one row per evaluated run."""
    rows = []
    for run in runs:
        rep = run.get("report")
        if not rep:
            continue
        agg = rep.get("aggregates", rep)
        rows.append({
            "run": run["name"],
            "task": agg.get("task"),
            "scheme": rep.get("scheme", agg.get("scheme")),
            "seed": agg.get("seed"),
            "id_psnr": agg.get("clean_psnr"),
            "id_ssim": agg.get("clean_ssim"),
            "attack_psnr": agg.get("attacked_psnr"),
            "attack_ssim": agg.get("attacked_ssim"),
            "ood_psnr": agg.get("ood_psnr"),
            "ood_ssim": agg.get("ood_ssim"),
            "id_mse": agg.get("clean_mse"),
            "attack_mse": agg.get("attacked_mse"),
            "ood_mse": agg.get("ood_mse"),
            "generalization_mse": agg.get("generalization_mse"),
        })
    if rows:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
    return len(rows)


def write_scatter_csv(runs: list[dict], out_path: Path) -> int:
    """Robustness vs accuracy scatter points, one per (scheme, seed)."""
    rows = []
    for run in runs:
        rep = run.get("report")
        if not rep:
            continue
        agg = rep.get("aggregates", rep)
        if agg.get("attacked_psnr") is None:
            continue
        rows.append({
            "scheme": rep.get("scheme"),
            "seed": agg.get("seed"),
            "id_psnr": agg.get("clean_psnr"),
            "attack_psnr": agg.get("attacked_psnr"),
            "ood_psnr": agg.get("ood_psnr"),
        })
    if rows:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return len(rows)


def render_loss_curves(runs: list[dict], out_path: Path) -> bool:
    series = []
    for run in runs:
        path = run.get("loss_csv")
        if not path:
            continue
        epochs, losses = [], []
        with open(path) as fh:
            for row in csv.DictReader(fh):
                epochs.append(int(row["epoch"]))
                losses.append(float(row["mean_loss"]))
        if epochs:
            label = run.get("report", {}).get("scheme", run["name"])
            series.append((label, epochs, losses))
    if not series:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, epochs, losses in series:
        ax.semilogy(epochs, losses, label=str(label))
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return True


def render_scatter(runs: list[dict], out_path: Path) -> bool:
    points = []
    for run in runs:
        rep = run.get("report")
        if not rep:
            continue
        agg = rep.get("aggregates", rep)
        if agg.get("attacked_psnr") is None or agg.get("clean_psnr") is None:
            continue
        points.append((rep.get("scheme", "?"), agg["attacked_psnr"], agg["clean_psnr"]))
    if not points:
        return False
    fig, ax = plt.subplots(figsize=(5, 4))
    schemes = sorted({p[0] for p in points})
    for scheme in schemes:
        xs = [p[1] for p in points if p[0] == scheme]
        ys = [p[2] for p in points if p[0] == scheme]
        ax.scatter(xs, ys, label=scheme)
    ax.set_xlabel("attacked PSNR (dB)")
    ax.set_ylabel("in-distribution PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return True


def render_sweep_curves(runs: list[dict], out_path: Path) -> bool:
    rows = []
    for run in runs:
        sweep_csv = run["dir"] / "sweep_risk.csv"
        if sweep_csv.exists():
            with open(sweep_csv) as fh:
                rows.extend(list(csv.DictReader(fh)))
    if not rows:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    epsilons = sorted({float(r["epsilon"]) for r in rows})
    for eps in epsilons:
        pts: dict[float, list[float]] = {}
        for r in rows:
            if float(r["epsilon"]) == eps and r["risk"] not in ("nan", ""):
                pts.setdefault(float(r["sigma2"]), []).append(float(r["risk"]))
        sigmas = sorted(pts)
        means = [sum(pts[s]) / len(pts[s]) for s in sigmas]
        ax.plot(sigmas, means, marker="o", label=f"eps={eps}")
        if means:
            best = sigmas[means.index(min(means))]
            ax.plot([best], [min(means)], marker="o", color="red", zorder=5)
    ax.set_xscale("symlog", linthresh=1e-4)
    ax.set_xlabel("jitter variance")
    ax.set_ylabel("worst-case risk")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return True


def render_toy_scatter(runs: list[dict], out_path: Path) -> bool:
    frames: dict[str, list[tuple[float, float]]] = {}
    truth: list[tuple[float, float]] = []
    for run in runs:
        path = run.get("recons_csv")
        if not path:
            continue
        scheme = run.get("report", {}).get("scheme", run["name"])
        with open(path) as fh:
            for row in csv.DictReader(fh):
                pt = (float(row["x0"]), float(row["x1"]))
                if row["kind"] == "truth":
                    truth.append(pt)
                elif row["kind"] == "attacked":
                    frames.setdefault(str(scheme), []).append(pt)
    if not frames:
        return False
    fig, ax = plt.subplots(figsize=(5, 5))
    for scheme, pts in sorted(frames.items()):
        ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=10, label=scheme)
    if truth:
        ax.scatter([p[0] for p in truth], [p[1] for p in truth], marker="x", c="red",
                   s=40, label="truth")
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_title("attacked reconstructions")
    ax.legend(fontsize=8)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return True


def build_report(root, out_dir) -> dict:
    """Aggregate everything under ``root`` into ``out_dir``; returns a manifest."""
    root = Path(root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = collect_runs(root)
    manifest = {
        "runs_found": len(runs),
        "summary_rows": write_summary_table(runs, out_dir / "summary_table.csv"),
        "scatter_rows": write_scatter_csv(runs, out_dir / "robustness_scatter.csv"),
        "figures": {},
    }
    for name, fn in (("loss_curves", render_loss_curves),
                     ("robustness_scatter", render_scatter),
                     ("sweep_curves", render_sweep_curves),
                     ("toy_scatter", render_toy_scatter)):
        path = out_dir / f"{name}.png"
        manifest["figures"][name] = fn(runs, path)
    with open(out_dir / "report_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return manifest
