"""SVG figures for sweep reports, each written next to the table it draws."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport, _fmt  # noqa: E402
from .model import ExpertLabel  # noqa: E402

# fixed element ids and no date stamp: identical inputs give identical bytes
matplotlib.rcParams["svg.hashsalt"] = "adaptive-iris"
SVG_META = {"Date": None, "Creator": None}

TABLE_COLUMNS = ("condition", "sigma", "diameter", "policy", "eer", "d_prime")


def _write_table(path: Path, rows: list[dict], columns=TABLE_COLUMNS) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def _fixed(report: EvalReport, axis: str) -> list[dict]:
    """Blur-off rows (EER vs diameter) or full-size rows (EER vs sigma)."""
    rows = [r for r in report.rows if r["condition"] != "combined"]
    if axis == "diameter":
        return sorted((r for r in rows if r["sigma"] == 0.0), key=lambda r: (r["policy"], r["diameter"]))
    return sorted((r for r in rows if r["diameter"] == 160.0), key=lambda r: (r["policy"], r["sigma"]))


def plot_eer_curve(report: EvalReport, axis: str, out_dir: Path) -> list[Path]:
    rows = _fixed(report, axis)
    name = f"eer_vs_{axis}"
    table = _write_table(out_dir / f"{name}.tsv", rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for policy in dict.fromkeys(r["policy"] for r in rows):
        pr = [r for r in rows if r["policy"] == policy]
        ax.plot([r[axis] for r in pr], [r["eer"] for r in pr], marker="o", label=policy)
    ax.set_xlabel("iris diameter (px)" if axis == "diameter" else "Gaussian blur sigma")
    ax.set_ylabel("EER")
    if axis == "diameter":
        ax.set_title("EER vs iris diameter (no blur)")
    else:
        ax.set_title("EER vs blur (diameter 160)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return [table, _save(fig, out_dir / f"{name}.svg")]


def plot_label_map(labels, out_dir: Path) -> list[Path]:
    """Best expert per (sigma, diameter) cell; sigma grows downward, diameter rightward."""
    table = out_dir / "best_expert.tsv"
    with table.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("sigma_lo", "sigma_hi", "diameter_lo", "diameter_hi", "label", "eer_hr", "eer_mr", "eer_lr"))
        for i in range(labels.labels.shape[0]):
            for j in range(labels.labels.shape[1]):
                w.writerow([_fmt(float(labels.sigma_edges[i])), _fmt(float(labels.sigma_edges[i + 1])),
                            _fmt(float(labels.diameter_edges[j])), _fmt(float(labels.diameter_edges[j + 1])),
                            ExpertLabel(int(labels.labels[i, j])).name,
                            *(_fmt(float(v)) for v in labels.eer[i, j])])
    fig, ax = plt.subplots(figsize=(5, 3.8))
    cmap = matplotlib.colors.ListedColormap(["#1b9e77", "#d95f02", "#7570b3"])
    ax.pcolormesh(labels.diameter_edges, labels.sigma_edges, labels.labels, cmap=cmap, vmin=-0.5, vmax=2.5)
    for i, s in enumerate(labels.sigma_mids):
        for j, d in enumerate(labels.diameter_mids):
            ax.text(d, s, ExpertLabel(int(labels.labels[i, j])).name, ha="center", va="center", fontsize=7,
                    color="white")
    ax.invert_yaxis()
    ax.set_xlabel("iris diameter (px)")
    ax.set_ylabel("Gaussian blur sigma")
    ax.set_title("best expert per degradation")
    fig.tight_layout()
    return [table, _save(fig, out_dir / "best_expert.svg")]


def plot_det(report: EvalReport, out_dir: Path, conditions=("s5_d20", "combined")) -> list[Path]:
    paths = []
    for cond in conditions:
        curves = {p: c for (cn, p), c in sorted(report.det.items()) if cn == cond}
        if not curves:
            continue
        table = out_dir / f"det_{cond}.tsv"
        with table.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(("policy", "threshold", "far", "frr"))
            for policy, c in curves.items():
                for t, a, r in zip(c.thresholds, c.far, c.frr):
                    w.writerow((policy, _fmt(float(t)), _fmt(float(a)), _fmt(float(r))))
        fig, ax = plt.subplots(figsize=(4.5, 4))
        floor = 1e-4
        for policy, c in curves.items():
            ax.plot(np.maximum(c.far, floor), np.maximum(c.frr, floor), label=policy, drawstyle="steps-post")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("false acceptance rate")
        ax.set_ylabel("false rejection rate")
        ax.set_title(f"DET, {cond}")
        ax.grid(alpha=0.3, which="both")
        ax.legend(fontsize=7)
        fig.tight_layout()
        paths += [table, _save(fig, out_dir / f"det_{cond}.svg")]
    return paths


def render_all(report: EvalReport, labels, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = plot_eer_curve(report, "diameter", out_dir) + plot_eer_curve(report, "sigma", out_dir)
    if labels is not None:
        paths += plot_label_map(labels, out_dir)
    if report.det:
        paths += plot_det(report, out_dir)
    return paths


def table_matches_report(table: str | Path, report: EvalReport) -> bool:
    """True when every table row equals the report row it was drawn from."""
    with Path(table).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        ref = report.get(r["condition"], r["policy"])
        for c in TABLE_COLUMNS:
            v = ref[c]
            if isinstance(v, float):
                got = float(r[c])
                if not (got == round(v, 10) or (math.isnan(v) and math.isnan(got))):
                    return False
            elif str(v) != r[c]:
                return False
    return True
