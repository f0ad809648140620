"""Static figure emission: every plot is written as a PNG next to a CSV of its data."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .eval.pca import pca_project  # noqa: E402

METRIC_COLUMNS = ("sequence_id", "condition", "metric", "value")

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 4.5
params = {
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 150,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
}


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics_csv(path, rows) -> Path:
    """``rows`` are (sequence_id, condition, metric, value) tuples."""
    return write_csv(path, METRIC_COLUMNS, rows)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(history, out_dir, name="loss"):
    """Training curves from a manifest metric log (list of dicts with 'step')."""
    out_dir = Path(out_dir)
    keys = sorted({k for h in history for k in h if k != "step"})
    steps = [h["step"] for h in history]
    write_csv(out_dir / f"{name}.csv", ["step", *keys],
              [[h["step"], *[h.get(k, "") for k in keys]] for h in history])
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for k in keys:
            vals = np.array([h.get(k, np.nan) for h in history], dtype=float)
            if np.all(vals[np.isfinite(vals)] > 0):
                ax.plot(steps, vals, label=k)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(ncol=2)
        fig.tight_layout()
        png = _save(fig, out_dir / f"{name}.png")
    return png, out_dir / f"{name}.csv"


def summarize_curves(metric_rows, metric="PSNR"):
    """metrics.csv rows -> {condition: (variances, means, stds)}.

    Conditions are named ``<model>/<region>/var=<v>``.
    """
    groups = {}
    for r in metric_rows:
        if r["metric"] != metric:
            continue
        model_region, _, var = r["condition"].rpartition("/var=")
        if not model_region:
            continue
        groups.setdefault(model_region, {}).setdefault(float(var), []).append(float(r["value"]))
    out = {}
    for cond, by_var in groups.items():
        vs = sorted(by_var)
        out[cond] = (vs, [float(np.mean(by_var[v])) for v in vs], [float(np.std(by_var[v])) for v in vs])
    return out


def plot_psnr_curves(metric_rows, out_dir, name="psnr_vs_variance", metric="PSNR"):
    out_dir = Path(out_dir)
    curves = summarize_curves(metric_rows, metric)
    rows = [[cond, v, m, s] for cond, (vs, ms, ss) in sorted(curves.items()) for v, m, s in zip(vs, ms, ss)]
    write_csv(out_dir / f"{name}.csv", ["condition", "variance", "mean", "std"], rows)
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for cond, (vs, ms, ss) in sorted(curves.items()):
            ax.errorbar(vs, ms, yerr=ss, marker="o", capsize=2, label=cond)
        ax.set_xscale("log")
        ax.set_xlabel("noise variance")
        ax.set_ylabel(f"region {metric} (dB)" if metric == "PSNR" else metric)
        if curves:
            ax.legend()
        fig.tight_layout()
        png = _save(fig, out_dir / f"{name}.png")
    return png, out_dir / f"{name}.csv"


def plot_pca_scatter(points, labels, out_dir, name="pca", label_name="class"):
    out_dir = Path(out_dir)
    proj, ratios, _ = pca_project(points, 2)
    labels = np.asarray(labels)
    write_csv(out_dir / f"{name}.csv", ["pc1", "pc2", label_name],
              [[float(a), float(b), int(c)] for (a, b), c in zip(proj, labels)])
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        sc = ax.scatter(proj[:, 0], proj[:, 1], c=labels, cmap="tab10", s=8)
        ax.set_xlabel(f"PC1 ({100 * ratios[0]:.1f}%)")
        ax.set_ylabel(f"PC2 ({100 * ratios[1]:.1f}%)")
        fig.colorbar(sc, ax=ax, label=label_name)
        fig.tight_layout()
        png = _save(fig, out_dir / f"{name}.png")
    return png, out_dir / f"{name}.csv"


def image_grid(rows, out_path, titles=None):
    """Save rows of (T, H, W) grayscale stacks as a single PNG grid."""
    rows = [np.asarray(r) for r in rows]
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(n_cols * 0.8, n_rows * 0.8), squeeze=False)
    for i, r in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i, j]
            ax.axis("off")
            if j < len(r):
                ax.imshow(np.clip(r[j], 0, 1), cmap="gray", vmin=0, vmax=1)
        if titles:
            axes[i, 0].set_title(titles[i], fontsize=6, loc="left")
    return _save(fig, out_path)
