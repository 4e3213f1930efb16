"""PNG/SVG figures for evaluation reports and sweeps."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("png", "svg")


def _save(fig, out: Path, stem: str) -> list:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in FORMATS:
        p = out / f"{stem}.{fmt}"
        # fixed metadata keeps repeated renders byte-identical
        meta = {"Software": None} if fmt == "png" else {"Date": None, "Creator": None}
        fig.savefig(p, dpi=100, metadata=meta)
        paths.append(p)
    plt.close(fig)
    return paths


def plot_yaw_bins(yaw_bins: dict, out_dir, title: str = "MAE by ground-truth yaw") -> list:
    """Grouped bars of pitch/yaw/roll MAE per yaw bin, with head counts on top."""
    edges = np.asarray(yaw_bins["edges"])
    centers = (edges[:-1] + edges[1:]) / 2
    width = (edges[1] - edges[0]) / 4
    mae = np.array([m if m is not None else [np.nan] * 3 for m in yaw_bins["mae"]], dtype=float)
    fig, ax = plt.subplots(figsize=(9, 4))
    for k, (name, color) in enumerate(zip(("pitch", "yaw", "roll"), ("tab:blue", "tab:orange", "tab:green"))):
        ax.bar(centers + (k - 1) * width, mae[:, k], width, label=name, color=color)
    for c, n in zip(centers, yaw_bins["counts"]):
        ax.text(c, 0, str(n), ha="center", va="bottom", fontsize=7, color="0.3")
    ax.set_xticks(edges)
    ax.set_xlabel("ground-truth yaw (deg)")
    ax.set_ylabel("MAE (deg)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(out_dir), "mae_by_yaw")


def plot_sweep(rows: list, out_dir) -> list:
    """One figure per swept key: MAE (left axis) and AP (right axis) per value."""
    ok = [r for r in rows if r.get("status") == "ok" and r.get("val_mae_avg") is not None]
    keys = sorted({k for r in rows for k in r["setting"]})
    paths = []
    for key in keys:
        vals = sorted({r["setting"][key] for r in ok if key in r["setting"]}, key=lambda v: (str(type(v)), v))
        if not vals:
            continue
        xs = np.arange(len(vals))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax2 = ax.twinx()
        for metric, color in (("val_mae_pitch", "tab:blue"), ("val_mae_yaw", "tab:orange"),
                              ("val_mae_roll", "tab:green"), ("val_mae_avg", "k")):
            ys = [np.mean([r[metric] for r in ok if r["setting"].get(key) == v]) for v in vals]
            ax.plot(xs, ys, "o-", color=color, label=metric.replace("val_mae_", "MAE "))
        ap = [np.mean([r["val_ap"] for r in ok if r["setting"].get(key) == v]) for v in vals]
        ax2.plot(xs, ap, "s--", color="tab:red", label="AP")
        ax.set_xticks(xs, [str(v) for v in vals])
        ax.set_xlabel(key)
        ax.set_ylabel("MAE (deg)")
        ax2.set_ylabel("AP")
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, fontsize=8)
        fig.tight_layout()
        paths += _save(fig, Path(out_dir), f"sweep_{key.replace('.', '_')}")
    return paths
