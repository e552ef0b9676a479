"""PNG figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": "enko"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_dataset(ds, path, n_show: int = 10) -> None:
    k = min(n_show, ds.n)
    fig, axes = plt.subplots(1, 2 if ds.latents is not None else 1, figsize=(9, 3.5), squeeze=False)
    ax = axes[0, 0]
    for i in range(k):
        ax.plot(ds.sequences[i, :, 0], lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("x[0] (scaled)")
    ax.set_title("observations")
    if ds.latents is not None:
        ax = axes[0, 1]
        for i in range(k):
            z = ds.latents[i]
            ax.plot(z[:, 0], z[:, 1] if z.shape[1] > 1 else np.zeros(len(z)), lw=1)
        ax.set_xlabel("z[0]")
        ax.set_ylabel("z[1]")
        ax.set_title("true latents")
    _save(fig, path)


def plot_history(histories: dict, path) -> None:
    """``histories`` maps a label to a list of epoch records."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, hist in histories.items():
        ep = [r.epoch for r in hist]
        ax.plot(ep, [r.train_objective for r in hist], lw=1, label=f"{label} train")
        ax.plot(ep, [r.valid_objective for r in hist], lw=1, ls="--", label=f"{label} valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective per step")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_mse(curves: dict, path, logy: bool = True) -> None:
    """``curves`` maps a label to ``(horizons, mse, stderr)``."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, (h, m, se) in curves.items():
        ax.errorbar(h, m, yerr=se, lw=1, capsize=2, label=label)
    ax.set_xlabel("horizon")
    ax.set_ylabel("MSE")
    if logy:
        ax.set_yscale("log")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_gradvar(rows: list[dict], path) -> None:
    """Grouped bars of log10 variance per parameter group and estimator."""
    groups = list(dict.fromkeys(r["parameter_group"] for r in rows))
    ests = list(dict.fromkeys(r["estimator"] for r in rows))
    cells = list(dict.fromkeys((r["d_x"], r["d_z"]) for r in rows))
    fig, axes = plt.subplots(len(cells), 1, figsize=(max(6, 0.6 * len(groups) * len(ests) / 2), 3 * len(cells)),
                             squeeze=False)
    width = 0.8 / max(len(ests), 1)
    for ax, (dx, dz) in zip(axes[:, 0], cells):
        for j, est in enumerate(ests):
            vals = []
            for g in groups:
                v = [r["variance"] for r in rows
                     if r["estimator"] == est and r["parameter_group"] == g and (r["d_x"], r["d_z"]) == (dx, dz)]
                vals.append(np.log10(v[0]) if v and v[0] > 0 else np.nan)
            ax.bar(np.arange(len(groups)) + j * width, vals, width, label=est)
        ax.set_xticks(np.arange(len(groups)) + 0.4 - width / 2)
        ax.set_xticklabels(groups, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("log10 variance")
        ax.set_title(f"d_x={dx}, d_z={dz}")
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_sweep(values, mse_mean, path, axis: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, mse_mean, marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("mean validation MSE")
    _save(fig, path)
