#!/usr/bin/env python3
"""Plot a continual run directory: latent PCA panels per stage plus the
score matrix and per-transition drift.

Usage:
    python3 scripts/plot_run.py runs/grid/segreg-seed0 --out run.png
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:  # pragma: no cover - plotting is optional tooling
    print("plot_run.py needs matplotlib (pip install matplotlib)", file=sys.stderr)
    sys.exit(1)

import numpy as np


def load_latents(run_dir: Path):
    stages = []
    for path in sorted(run_dir.glob("latents_stage_*.csv"), key=lambda p: int(p.stem.rsplit("_", 1)[1])):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        stages.append(
            (
                int(path.stem.rsplit("_", 1)[1]),
                np.array([[float(r["pc1"]), float(r["pc2"])] for r in rows]),
                np.array([int(r["class"]) for r in rows]),
            )
        )
    return stages


def load_scores(run_dir: Path) -> np.ndarray:
    with open(run_dir / "scores.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    t = max(int(r["stage"]) for r in rows)
    r_matrix = np.zeros((t, t))
    for row in rows:
        r_matrix[int(row["stage"]) - 1, int(row["task"]) - 1] = float(row["dsc"])
    return r_matrix


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir", help="continual run directory")
    parser.add_argument("--out", default=None, help="output image (default <run_dir>/run.png)")
    args = parser.parse_args(argv)

    run_dir = Path(args.run_dir)
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    stages = load_latents(run_dir)
    r_matrix = load_scores(run_dir)
    drift = None
    if (run_dir / "drift.json").exists():
        drift = json.loads((run_dir / "drift.json").read_text(encoding="utf-8"))

    n_panels = len(stages) + 2
    fig, axes = plt.subplots(1, n_panels, figsize=(3.2 * n_panels, 3.2))

    for ax, (stage, coords, classes) in zip(axes, stages):
        for c in np.unique(classes):
            sel = classes == c
            ax.scatter(coords[sel, 0], coords[sel, 1], s=4, alpha=0.6,
                       label=f"class {c}" if stage == 1 else None)
        ax.set_title(f"latents, stage {stage}")
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
    if stages:
        axes[0].legend(loc="best", fontsize=7)

    ax_r = axes[len(stages)]
    im = ax_r.imshow(r_matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax_r.set_title(f"DSC matrix ({metrics['method']})")
    ax_r.set_xlabel("task")
    ax_r.set_ylabel("after stage")
    for i in range(r_matrix.shape[0]):
        for j in range(r_matrix.shape[1]):
            ax_r.text(j, i, f"{r_matrix[i, j]:.2f}", ha="center", va="center",
                      color="white", fontsize=7)
    fig.colorbar(im, ax=ax_r, fraction=0.046)

    ax_d = axes[n_panels - 1]
    if drift is not None:
        kl = drift["step_kl"]
        ax_d.bar(range(2, len(kl) + 2), kl)
        ax_d.set_title(f"drift (total {sum(kl):.2f})")
        ax_d.set_xlabel("stage transition t")
        ax_d.set_ylabel("KL(fit_t || fit_t-1)")
    else:
        ax_d.axis("off")
        ax_d.set_title("no drift data")

    fig.tight_layout()
    out_path = Path(args.out) if args.out else run_dir / "run.png"
    fig.savefig(out_path, dpi=130)
    print(f"wrote {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
