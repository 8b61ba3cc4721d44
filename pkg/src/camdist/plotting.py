"""SVG figures for adaptation curves, training losses and metric tables.

Figures are written with a fixed hash salt and no date stamp so that the
same data always produces the same bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {"svg.hashsalt": "camdist", "svg.fonttype": "path", "figure.dpi": 100}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_curves(curves, path, title="", key="mpjpe", ylabel="MPJPE (mm)"):
    """``curves`` maps a label to curve rows (dicts with 'epoch' and ``key``).

    Labels containing 'pre' are drawn dashed, the rest solid.
    """
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, rows in curves.items():
            rows = [r for r in rows if key in r]
            if not rows:
                continue
            ls = "--" if "pre" in label.split("/")[0] else "-"
            ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], ls, label=label)
        ax.set_xlabel("adaptation epoch")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_train_report(report, path, title="training loss"):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        n_pre = len(report.pretrain_loss)
        if n_pre:
            ax.plot(range(1, n_pre + 1), report.pretrain_loss, "-o", ms=3, label="pretrain")
        if report.task_train_loss:
            xs = range(n_pre + 1, n_pre + len(report.task_train_loss) + 1)
            ax.plot(xs, report.task_train_loss, "-o", ms=3, label="task-level train")
            ax.plot(xs, report.task_test_loss, "-s", ms=3, label="task-level test")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MPJPE loss (m)")
        ax.set_title(title)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_metric_bars(rows, path, metric="mpjpe", title=""):
    """Grouped bars of one metric: presets on the x axis, one bar per variant/scenario."""
    rows = [r for r in rows if r["metric"] == metric]
    presets = list(dict.fromkeys(r["preset"] for r in rows))
    series = list(dict.fromkeys(_series(r) for r in rows))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(presets) + 2), 4))
        width = 0.8 / max(len(series), 1)
        for k, s in enumerate(series):
            vals = {r["preset"]: r["value"] for r in rows if _series(r) == s}
            xs = [i + k * width for i, p in enumerate(presets) if p in vals]
            ax.bar(xs, [vals[p] for p in presets if p in vals], width, label=s)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(presets))])
        ax.set_xticklabels(presets)
        ax.set_ylabel(metric)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(fontsize=7)
        return _save(fig, path)


def _series(row):
    parts = [p for p in (row.get("variant", ""), row.get("scenario", "")) if p]
    return "/".join(parts) or "value"
