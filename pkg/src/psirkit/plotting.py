"""Figures written next to the CLI's CSV outputs.

Everything renders through the Agg backend straight to files; nothing is
shown on screen.
"""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["STYLE", "figure", "save", "plot_training", "plot_metrics", "plot_verdicts", "plot_image"]

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def figure(width=5.0, aspect=0.62, nrows=1, ncols=1):
    """New figure and axes under :data:`STYLE` (golden-ish aspect by default)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width, width * aspect))
    return fig, ax


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(run, path):
    """Train and validation SSIM against optimizer step; the selected checkpoint is starred."""
    fig, ax = figure()
    steps = [s for s, _, _ in run.log]
    ax.plot(steps, [t for _, t, _ in run.log], "-", color="0.3", label="train")
    val = [(s, v) for s, _, v in run.log if not math.isnan(v)]
    if val:
        ax.plot(*zip(*val), "o", color="C0", ms=4, label="validation")
    if run.selected is not None:
        ax.plot(run.selected.step, run.selected.val_ssim, "*", color="C3", ms=11, label="selected")
    ax.set_xlabel("step")
    ax.set_ylabel("mean SSIM")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_metrics(report, path):
    """Per-patient metric means as dot strips with the macro mean marked."""
    names = (("ssim", "SSIM"), ("psnr_db", "PSNR (dB)"), ("nrmse", "NRMSE"))
    fig, axes = figure(width=7.0, aspect=0.3, ncols=3)
    for ax, (key, label) in zip(axes, names):
        vals = np.array([v[key] for v in report.per_patient.values()], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            jitter = np.linspace(-0.15, 0.15, vals.size) if vals.size > 1 else np.zeros(1)
            ax.plot(jitter, vals, "o", color="0.4", ms=3)
        m = report.mean[key]
        if math.isfinite(m):
            ax.axhline(m, color="C3", lw=1)
        ax.set_xticks([])
        ax.set_xlim(-0.5, 0.5)
        ax.set_title(label)
    return save(fig, path)


def plot_verdicts(report, path):
    """Mean score of each arm with its bootstrap CI, one row per variant and reader."""
    keys = [(var, rdr) for var in report.variants for rdr in report.readers if (var, rdr) in report.per_reader]
    fig, ax = figure(width=5.0, aspect=0.2 + 0.1 * max(len(keys), 1))
    for y, key in enumerate(keys):
        e = report.per_reader[key]
        for arm, dy, color in (("a", -0.12, "C0"), ("b", 0.12, "0.5")):
            lo, hi = e[f"ci_{arm}"]
            ax.plot([lo, hi], [y + dy, y + dy], "-", color=color, lw=1)
            ax.plot(e[f"mean_{arm}"], y + dy, "o", color=color, ms=4, label=arm.upper() if y == 0 else None)
    ax.set_yticks(range(len(keys)))
    ax.set_yticklabels([f"{var} / {rdr} ({report.per_reader[(var, rdr)]['verdict'].decision})" for var, rdr in keys])
    ax.invert_yaxis()
    ax.set_xlabel("mean score (95% CI)")
    ax.legend(frameon=False, loc="lower right")
    return save(fig, path)


def plot_image(img, path, window=None, title=None):
    """Signed image in gray with an optional ``(lo, hi)`` display window."""
    img = np.asarray(img, dtype=float)
    if window is None:
        window = tuple(np.percentile(img, [1, 99]))
    fig, ax = figure(width=4.0, aspect=img.shape[0] / img.shape[1])
    ax.imshow(img, cmap="gray", vmin=window[0], vmax=window[1], interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return save(fig, path)
