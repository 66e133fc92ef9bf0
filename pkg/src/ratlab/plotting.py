"""Static report figures (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def learning_curve(history: list[dict], path, title: str = "") -> Path:
    """Training loss (left axis) and dev F1 (right axis) per epoch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [h["epoch"] + 1 for h in history]
        ax.plot(ep, [h["loss"] for h in history], "o-", color="tab:blue", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if "dev_f1" in history[0]:
            ax2 = ax.twinx()
            ax2.plot(ep, [h["dev_f1"] for h in history], "s--", color="tab:orange", label="dev F1")
            ax2.set_ylabel("dev F1")
            ax2.set_ylim(0, 1.02)
            ax2.grid(False)
        if title:
            ax.set_title(title)
        fig.legend(loc="upper center", ncol=2)
        return _save(fig, path)


def performance_bars(table: list[list[str]], path) -> Path:
    """Grouped bars from a performance table (header row, then regime/method rows)."""
    header, rows = table[0], [r for r in table[1:] if r[1] != "Avg"]
    tasks = header[2:]
    labels = [f"{r[0]}\n{r[1]}" for r in rows]
    width = 0.8 / max(len(tasks), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(rows) + 2), 3.6))
        for j, task in enumerate(tasks):
            vals = [_num(r[2 + j]) for r in rows]
            ax.bar([i + j * width for i in range(len(rows))], vals, width, label=task)
        ax.set_xticks([i + width * (len(tasks) - 1) / 2 for i in range(len(rows))])
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel("test F1 (mean over seeds)")
        ax.set_ylim(0, 1.05)
        ax.legend()
        return _save(fig, path)


def cost_bars(rows: list[list[str]], path) -> Path:
    """Measured xFP per batch for each regime/method row."""
    body = rows[1:]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = {"Standard": "tab:gray", "AT": "tab:red", "RAT": "tab:green"}
        ax.bar(range(len(body)), [float(r[2]) for r in body], color=[colors.get(r[0], "tab:blue") for r in body])
        ax.set_xticks(range(len(body)))
        ax.set_xticklabels([f"{r[0]}\n{r[1]}" for r in body], fontsize=7)
        ax.set_ylabel("xFP per batch")
        return _save(fig, path)


def robustness_curve(epsilons, clean: dict, attacked: list[dict], path, metric: str = "accuracy") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epsilons, [a[metric] for a in attacked], "o-", label="attacked")
        ax.axhline(clean[metric], color="k", ls=":", label="clean")
        ax.set_xlabel("epsilon")
        ax.set_ylabel(metric)
        ax.legend()
        return _save(fig, path)


def _num(cell: str) -> float:
    try:
        return float(cell.rstrip("*"))
    except ValueError:
        return 0.0
