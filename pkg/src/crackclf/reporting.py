"""Run artifacts: metric records, PR-curve tables and figures."""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_metrics(report, out_dir, meta=None, figure=True):
    """Write ``metrics.json``, ``pr_curve.csv``, ``report.txt`` and (optionally) ``pr_curve.png``.

    Returns a dict of the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = dict(report.summary())
    record["meta"] = dict(meta or {})
    paths = {"json": out_dir / "metrics.json", "csv": out_dir / "pr_curve.csv", "txt": out_dir / "report.txt"}
    paths["json"].write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "precision", "recall"])
        for t, p, r in report.pr_curve:
            w.writerow([f"{t:.3f}", repr(float(p)), repr(float(r))])
    paths["txt"].write_text(format_report(report, meta))
    if figure:
        paths["png"] = out_dir / "pr_curve.png"
        plot_pr_curve(report, paths["png"])
    return paths


def format_report(report, meta=None):
    lines = [f"{k}\t{v}" for k, v in sorted((meta or {}).items())]
    for key in ("pr", "re", "f1", "ods", "ois", "best_t", "threshold", "tolerance", "n_images"):
        value = getattr(report, key)
        lines.append(f"{key}\t{value:.6f}" if isinstance(value, float) else f"{key}\t{value}")
    return "\n".join(lines) + "\n"


def plot_pr_curve(report, path):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if report.pr_curve:
        _, p, r = zip(*report.pr_curve)
        ax.plot(r, p, lw=1.5, label=f"ODS={report.ods:.3f}  OIS={report.ois:.3f}")
    ax.plot([report.re], [report.pr], "o", ms=5, label=f"t={report.threshold:g}  F1={report.f1:.3f}")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(records, path):
    """Per-step training curves from trainer log records."""
    seg = [r for r in records if r.get("kind") == "segmenter"]
    if not seg:
        return None
    keys = [k for k in ("l_total", "l_fuse", "adv_loss", "J") if k in seg[0]]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in seg]
    for k in keys:
        ax.plot(steps, [r[k] for r in seg], lw=1, label=k)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
