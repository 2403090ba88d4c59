"""Plot training and diagnostic CSVs written by the experiment runner.

Recognises theorem3.csv (gradient-norm running average and fit),
metrics.csv (mean return per mini-batch) and lemma3.csv (variance vs R).
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]
            if all(_is_float(r[k]) for r in rows)}


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def plot_dir(run: Path, out: Path):
    made = []
    if (run / "theorem3.csv").exists():
        d = read(run / "theorem3.csv")
        fig, ax = plt.subplots()
        ax.loglog(d["batch"], d["running_avg"], label="running average of |g|^2")
        ax.loglog(d["batch"], d["fit"], "--", label="c / sqrt(B) fit")
        ax.set_xlabel("mini-batch")
        ax.legend()
        made.append(_save(fig, out / "convergence.png"))
    if (run / "metrics.csv").exists():
        d = read(run / "metrics.csv")
        fig, ax = plt.subplots()
        k = max(1, len(d["batch"]) // 50)
        ax.plot(d["batch"], d["mean_return"], alpha=0.3)
        ax.plot(d["batch"][k - 1:], np.convolve(d["mean_return"], np.ones(k) / k, "valid"))
        ax.set_xlabel("mini-batch")
        ax.set_ylabel("mean episode return")
        made.append(_save(fig, out / "returns.png"))
    if (run / "lemma3.csv").exists():
        d = read(run / "lemma3.csv")
        fig, ax = plt.subplots()
        ax.loglog(d["R"], d["variance"], "o-")
        ax.loglog(d["R"], d["variance"][-1] * d["R"][-1] / d["R"], ":", label="slope -1")
        ax.set_xlabel("mini-batch size R")
        ax.set_ylabel("update variance")
        ax.legend()
        made.append(_save(fig, out / "variance.png"))
    return made


def _save(fig, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path, help="where to write PNGs (default: the run directory)")
    args = p.parse_args()
    for path in plot_dir(args.run_dir, args.out or args.run_dir):
        print(path)


if __name__ == "__main__":
    main()
