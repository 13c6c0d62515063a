"""Figure and summary emission for analysis results."""

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from jsonschema import validate  # noqa: E402

SUMMARY_VERSION = 1

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["version", "sections", "figures", "tables"],
    "properties": {
        "version": {"const": SUMMARY_VERSION},
        "sections": {"type": "object"},
        "figures": {"type": "array", "items": {"type": "string"}},
        "tables": {"type": "array", "items": {"type": "string"}},
    },
}


def to_jsonable(obj):
    """numpy/tuple/NaN-safe conversion; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "as_dict"):
        return to_jsonable(obj.as_dict())
    return obj


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def plot_npr(npr, path):
    ds = sorted(int(d) for d in npr)
    allv = [npr[d]["mean_all"] or 0.0 for d in ds]
    posv = [npr[d]["mean_positive"] or 0.0 for d in ds]
    fig, ax = plt.subplots(figsize=(6, 2.6))
    x = np.arange(len(ds))
    ax.bar(x - 0.2, allv, 0.4, label="all prospective", color="#9aa9c4")
    ax.bar(x + 0.2, posv, 0.4, label="positive prospective", color="#2f4b7c")
    ax.axhline(1.0, color="k", lw=0.8, ls=":")
    ax.set_xticks(x, [str(d) for d in ds])
    ax.set_xlabel("diagnosis")
    ax.set_ylabel("mean NPR")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_matrix(mat, path, title, row_labels=None, col_labels=None, vmin=0.0, vmax=1.0, fmt="{:.2f}", cmap="viridis"):
    mat = np.asarray(mat, dtype=float)
    fig, ax = plt.subplots(figsize=(0.45 * mat.shape[1] + 1.8, 0.4 * mat.shape[0] + 1.2))
    im = ax.imshow(np.ma.masked_invalid(mat), vmin=vmin, vmax=vmax, cmap=cmap)
    if mat.size <= 64:
        for (i, j), v in np.ndenumerate(mat):
            if np.isfinite(v):
                ax.text(j, i, fmt.format(v), ha="center", va="center", fontsize=6, color="w")
    ax.set_xticks(range(mat.shape[1]), col_labels or range(mat.shape[1]))
    ax.set_yticks(range(mat.shape[0]), row_labels or range(mat.shape[0]))
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.04)
    _save(fig, path)


def plot_confusions(confusions, path):
    kinds = list(confusions)
    fig, axes = plt.subplots(1, len(kinds), figsize=(2.6 * len(kinds), 2.6), squeeze=False)
    names = ["normal", "medium", "high"]
    for ax, kind in zip(axes[0], kinds):
        cm = np.asarray(confusions[kind])
        ax.imshow(cm, cmap="Blues")
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
        ax.set_xticks(range(3), names, rotation=45)
        ax.set_yticks(range(3), names)
        ax.set_title(kind)
        ax.set_xlabel("predicted")
    axes[0][0].set_ylabel("true")
    fig.tight_layout()
    _save(fig, path)


def plot_fairness(tests, path):
    labels = [f"{t['task']}:{t['attribute']}" for t in tests]
    disp = [t["disparity"] for t in tests]
    fig, ax = plt.subplots(figsize=(max(3, 0.5 * len(tests) + 1), 2.6))
    colors = ["#c23b22" if t["p_corrected"] < 0.05 else "#7a7a7a" for t in tests]
    ax.bar(range(len(tests)), disp, color=colors)
    ax.set_xticks(range(len(tests)), labels, rotation=60, ha="right")
    ax.set_ylabel("TPR disparity")
    fig.tight_layout()
    _save(fig, path)


def plot_overlays(overlays, path):
    """Token-importance heatmaps over a mid slice; ``overlays`` holds dicts with
    title, image (2D) and weights (2D, same shape)."""
    n = len(overlays)
    fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6), squeeze=False)
    for ax, ov in zip(axes[0], overlays):
        ax.imshow(ov["image"], cmap="gray", vmin=0, vmax=1)
        w = np.ma.masked_where(np.asarray(ov["weights"]) <= 0, ov["weights"])
        ax.imshow(w, cmap="autumn", alpha=0.45)
        if ov.get("mask") is not None:
            ax.contour(ov["mask"], levels=[0.5], colors="c", linewidths=0.6)
        ax.set_title(ov["title"], fontsize=7)
        ax.axis("off")
    _save(fig, path)


def plot_curves(series, path, ylabel, xlabel="step", logy=False):
    fig, ax = plt.subplots(figsize=(4, 2.6))
    for name, (x, y) in series.items():
        ax.plot(x, y, label=name, lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, path)


def curve_figure(path, series, ylabel, logy=False):
    """Standalone curve PNG; series with no points are skipped."""
    with plt.rc_context(STYLE):
        plot_curves({k: v for k, v in series.items() if len(v[0])}, path, ylabel, logy=logy)


def emit_report(sections, out_dir, overlays=None, curves=None):
    """Write figures, CSV tables and summary.json for whichever analyses are present.

    ``sections`` may hold npr, auc_matrix, priority, fairness, lime, localization,
    silhouette, skewness, retrieval and acceptance entries. Returns the summary dict.
    """
    os.makedirs(out_dir, exist_ok=True)
    figures, tables = [], []
    with plt.rc_context(STYLE):
        if "npr" in sections:
            npr = {int(k): v for k, v in sections["npr"].items()}
            plot_npr(npr, os.path.join(out_dir, "npr.png"))
            _write_csv(os.path.join(out_dir, "npr.csv"), ["diagnosis", "positive_rate", "mean_all", "mean_positive", "n_positive"],
                       [[d, v["positive_rate"], v["mean_all"], v["mean_positive"], v["n_positive"]] for d, v in sorted(npr.items())])
            figures.append("npr.png")
            tables.append("npr.csv")
        if "auc_matrix" in sections:
            am = sections["auc_matrix"]
            order = am["order"]
            mat = np.asarray(am["auc"], dtype=float)[np.ix_(order, order)] if len(order) == len(am["auc"]) else am["auc"]
            plot_matrix(mat, os.path.join(out_dir, "auc_matrix.png"), "logit vs label AUROC",
                        [str(o) for o in order], [str(o) for o in order], 0.0, 1.0)
            _write_csv(os.path.join(out_dir, "auc_matrix.csv"), ["logit"] + [f"label_{j}" for j in range(len(am["auc"][0]))],
                       [[i] + list(r) for i, r in enumerate(np.asarray(am["auc"]).tolist())])
            figures.append("auc_matrix.png")
            tables.append("auc_matrix.csv")
        if "priority" in sections:
            conf = {k: v["confusion"] for k, v in sections["priority"]["losses"].items()}
            plot_confusions(conf, os.path.join(out_dir, "confusion_matrices.png"))
            _write_csv(os.path.join(out_dir, "confusion_matrices.csv"), ["loss", "true", "pred", "count"],
                       [[k, i, j, int(c)] for k, cm in conf.items() for (i, j), c in np.ndenumerate(np.asarray(cm))])
            figures.append("confusion_matrices.png")
            tables.append("confusion_matrices.csv")
        if "fairness" in sections:
            tests = sections["fairness"]["tests"]
            plot_fairness(tests, os.path.join(out_dir, "fairness.png"))
            _write_csv(os.path.join(out_dir, "fairness.csv"), ["task", "attribute", "disparity", "p_value", "p_corrected"],
                       [[t["task"], t["attribute"], t["disparity"], t["p_value"], t["p_corrected"]] for t in tests])
            figures.append("fairness.png")
            tables.append("fairness.csv")
        if overlays:
            plot_overlays(overlays, os.path.join(out_dir, "lime_overlays.png"))
            figures.append("lime_overlays.png")
        for name, spec in (curves or {}).items():
            plot_curves(spec["series"], os.path.join(out_dir, f"{name}.png"), spec["ylabel"], logy=spec.get("logy", False))
            figures.append(f"{name}.png")
    summary = {"version": SUMMARY_VERSION, "sections": to_jsonable(sections),
               "figures": sorted(figures), "tables": sorted(tables)}
    validate(summary, SUMMARY_SCHEMA)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary
