"""Report figures.  Only the CLI imports this module; the numerical core never does."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def figsize(width: float = 5.0, ratio: float = GOLDEN):
    return (width, width * ratio)


def _save(fig, path):
    # no timestamp in the metadata so reruns produce the same file
    fig.savefig(path, metadata={"Software": None, "CreationDate": None} if str(path).endswith(".pdf")
                else {"Software": None})
    plt.close(fig)
    return path


def ratio_histogram(ratios_by_bucket: dict, path, title: str = "coefficient / bound"):
    """Histogram of achieved coefficient ratios, one colour per bucket; the gate is the line at 1."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        bins = np.linspace(0, 1.05, 43)
        for name, r in sorted(ratios_by_bucket.items()):
            r = np.asarray(r, dtype=float)
            if r.size:
                ax.hist(np.clip(r, 0, 1.05), bins=bins, histtype="step", label=f"{name} (max {r.max():.3f})")
        ax.axvline(1.0, color="k", lw=0.8, ls="--")
        ax.set_yscale("log")
        ax.set_xlabel("ratio")
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def sparse_family(cubes, L: int, path, title: str = "sparse family"):
    """Cubes drawn as horizontal bars at height = level."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        for Q in cubes:
            x0 = Q.corner[0] * 2.0 ** -L
            ax.plot([x0, x0 + Q.sidelength], [Q.level, Q.level], lw=2, solid_capstyle="butt")
        ax.invert_yaxis()
        ax.set_xlabel("x")
        ax.set_ylabel("level")
        ax.set_title(title)
        return _save(fig, path)


def level_profile(levels, values, path, ylabel: str, title: str = "", errors=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        ax.errorbar(levels, values, yerr=errors, marker="o", ms=3, lw=1, capsize=2)
        ax.set_xlabel("level")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        return _save(fig, path)


def ratio_series(values, path, ylabel: str = "ratio", title: str = "", reference: float | None = None):
    """Sorted per-trial ratios, optionally with a reference bound."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        v = np.sort(np.asarray(values, dtype=float))
        ax.plot(np.arange(len(v)), v, marker=".", lw=0.8)
        if reference is not None:
            ax.axhline(reference, color="k", ls="--", lw=0.8)
        ax.set_xlabel("trial (sorted)")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        return _save(fig, path)
