"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def read_columns(path) -> dict:
    """CSV file as {column: list of floats}; non-numeric cells are kept as strings."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {}
    for row in rows:
        for key, value in row.items():
            try:
                value = float(value)
            except (TypeError, ValueError):
                pass
            cols.setdefault(key, []).append(value)
    return cols


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def _smooth(values, window: int):
    if window <= 1 or len(values) < window:
        return list(values)
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_loss_curve(csv_path, out) -> Path:
    cols = read_columns(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(cols["epoch"], cols["loss"], color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("demonstration NLL")
        ax.set_title("Warm-up fit")
        return _save(fig, out)


def plot_training_curves(csv_path, out, window: int = 50) -> Path:
    cols = read_columns(csv_path)
    steps = cols["step"]
    with plt.rc_context(STYLE):
        fig, (ax_r, ax_m) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        for key, label, color in (("mean_reward_gm", "General", "C0"),
                                  ("mean_reward_pm", "Personalized", "C1")):
            vals = [v for v in cols[key]]
            pairs = [(s, v) for s, v in zip(steps, _smooth_nan(vals, window)) if v == v]
            if pairs:
                ax_r.plot(*zip(*pairs), label=label, color=color)
        ax_r.set_xlabel("step")
        ax_r.set_ylabel("mean rollout reward")
        ax_r.legend()
        ax_m.plot(steps, _smooth(cols["p_personalized_mean"], window), color="C2", label="P(Personalized)")
        ax_m.set_ylim(0.0, 1.0)
        ax_m.set_xlabel("step")
        ax_m.set_ylabel("mean selector probability")
        ax2 = ax_m.twinx()
        ax2.plot(steps, _smooth(cols["kl"], window), color="C3", alpha=0.6, label="KL")
        ax2.set_ylabel("KL to reference")
        ax2.grid(False)
        return _save(fig, out)


def _smooth_nan(values, window):
    # skip NaN steps (no rollout of that mode) when averaging
    out = []
    for i in range(len(values)):
        chunk = [v for v in values[max(0, i - window + 1):i + 1] if v == v]
        out.append(sum(chunk) / len(chunk) if chunk else float("nan"))
    return out


def plot_mode_proportions(reports: dict, out) -> Path:
    """Grouped bars of the Personalized-mode share per slice, one group per report."""
    labels = list(reports)
    slices = sorted({s for r in reports.values() for s in r.mode_proportion_by_slice})
    width = 0.8 / max(len(labels), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, label in enumerate(labels):
            props = [reports[label].mode_proportion_by_slice.get(s, 0.0) for s in slices]
            xs = [j + (i - (len(labels) - 1) / 2) * width for j in range(len(slices))]
            ax.bar(xs, props, width=width, label=label)
        ax.set_xticks(range(len(slices)))
        ax.set_xticklabels([s.replace("/", "\n") for s in slices])
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("share choosing Personalized")
        ax.legend(fontsize=7)
        return _save(fig, out)


def plot_sweep(csv_path, out) -> Path:
    cols = read_columns(csv_path)
    ratios = cols.pop("ratio")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, values in cols.items():
            ax.plot(ratios, values, marker="o", label=name.replace("_", " "))
        ax.set_xlabel("PersonalizedQA share")
        ax.set_ylabel("accuracy")
        ax.legend()
        return _save(fig, out)


def plot_comparison(rows: list, out) -> Path:
    """Bars of overall accuracy and oracle agreement per run from ``compare_runs`` rows."""
    names = [r["run"] for r in rows]
    acc = [float(r["overall"]) for r in rows]
    agree = [float(r["oracle_agreement"]) for r in rows]
    xs = range(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(rows)), 3.6))
        ax.bar([x - 0.2 for x in xs], acc, width=0.4, label="accuracy")
        ax.bar([x + 0.2 for x in xs], agree, width=0.4, label="oracle agreement")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=7)
        ax.set_ylim(0.0, 1.0)
        ax.legend()
        return _save(fig, out)
