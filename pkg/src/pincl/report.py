"""Report rendering: error-matrix heatmaps and score-vs-error scatter plots
written next to the delimited tables they come from."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def read_matrix_csv(path) -> dict:
    """Parse an error-matrix export back into arrays."""
    rows = []
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((int(row["stage"]), int(row["group"]),
                         float(row["rel_L2"]), float(row["rel_H1"]),
                         bool(int(row["ood_flag"]))))
    stages = sorted({r[0] for r in rows})
    groups = sorted({r[1] for r in rows})
    l2 = np.full((len(stages), len(groups)), np.nan)
    h1 = np.full_like(l2, np.nan)
    ood = np.zeros(l2.shape, dtype=bool)
    for stage, gid, rl2, rh1, flag in rows:
        i, j = stages.index(stage), groups.index(gid)
        l2[i, j], h1[i, j], ood[i, j] = rl2, rh1, flag
    return {"stages": stages, "groups": groups, "rel_l2": l2, "rel_h1": h1,
            "ood": ood}


def plot_error_matrix(matrix: dict, path, metric: str = "rel_l2",
                      title: str = "") -> None:
    values = matrix[metric]
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * values.shape[1],
                                    1.0 + 0.6 * values.shape[0]))
    capped = np.minimum(values, np.nanpercentile(values, 95))
    im = ax.imshow(capped, cmap="viridis", aspect="auto")
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            label = f"{values[i, j]:.2f}"
            weight = "bold" if matrix["ood"][i, j] else "normal"
            ax.text(j, i, label, ha="center", va="center", fontsize=7,
                    color="white", fontweight=weight)
    ax.set_xlabel("test group")
    ax.set_ylabel("trained through stage")
    ax.set_xticks(range(len(matrix["groups"])), matrix["groups"])
    ax.set_yticks(range(len(matrix["stages"])), matrix["stages"])
    ax.set_title(title or metric)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def read_scores_csv(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def plot_score_scatter(scores: list[dict], errors_by_id: dict, path) -> None:
    """Score vs true rel_L2, one point per sample (finite scores only)."""
    xs, ys = [], []
    for row in scores:
        key = (int(row["group_id"]), int(row["sample_index"]))
        err = errors_by_id.get(key)
        score = float(row["score"])
        if err is not None and np.isfinite(score):
            xs.append(score)
            ys.append(err)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xs, ys, s=12, alpha=0.7)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("PDE score")
    ax.set_ylabel("relative L2 error")
    ax.set_title("score vs true error")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report(matrix_path, out_dir, scores_path=None,
                  errors_by_id: dict | None = None) -> list[Path]:
    """Render figures for a matrix export (and optional score dump)."""
    out_dir = Path(out_dir)
    matrix = read_matrix_csv(matrix_path)
    produced = []
    for metric in ("rel_l2", "rel_h1"):
        target = out_dir / f"error_matrix_{metric}.png"
        plot_error_matrix(matrix, target, metric=metric)
        produced.append(target)
    if scores_path is not None and errors_by_id:
        target = out_dir / "score_scatter.png"
        plot_score_scatter(read_scores_csv(scores_path), errors_by_id, target)
        produced.append(target)
    return produced
