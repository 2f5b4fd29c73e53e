"""Deterministic figure rendering for the report paths.

All figures are written as SVG with a pinned hash salt and no creation
date, so identical inputs produce byte-identical files run after run.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "flowlab"
plt.rcParams["svg.fonttype"] = "path"

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def render_trajectory_panels(
    chains: dict[int, dict[int, tuple[float, tuple[float, ...]]]],
    steps: list[int],
    out_path,
    means=None,
    draw_paths: bool = False,
) -> None:
    """One scatter panel per selected step; stars mark the target means.

    `chains` maps chain id -> step -> (t, point); an empty mapping still
    yields a valid figure with axes only.
    """
    n_panels = max(len(steps), 1)
    fig, axes = plt.subplots(1, n_panels, figsize=(3.0 * n_panels, 3.2), squeeze=False)
    chain_ids = sorted(chains)
    for col, step in enumerate(steps if steps else [0]):
        ax = axes[0][col]
        xs, ys = [], []
        t_here = None
        for cid in chain_ids:
            rec = chains[cid].get(step)
            if rec is None:
                continue
            t_here, pt = rec
            xs.append(pt[0])
            ys.append(pt[1])
        if xs:
            ax.scatter(xs, ys, s=4.0, c="#1f77b4", linewidths=0)
        if draw_paths:
            for cid in chain_ids:
                path = [chains[cid][s][1] for s in sorted(chains[cid]) if s <= step]
                if len(path) > 1:
                    ax.plot([p[0] for p in path], [p[1] for p in path],
                            color="#1f77b4", alpha=0.2, linewidth=0.5)
        if means is not None:
            for m in means:
                ax.plot(m[0], m[1], marker="*", markersize=11, color="#d62728",
                        markeredgecolor="none", linestyle="none")
        title = f"t={t_here:.3f}" if t_here is not None else f"step {step}"
        ax.set_title(title, fontsize=9)
        ax.set_aspect("equal")
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)


def render_compare_figure(rows: list[dict], out_path) -> None:
    """Distance-to-data per strategy, grouped by strategy name.

    Rows carry name, scale (may be None) and sw_to_data; strategies with a
    varying scale are drawn as a line over it, the rest as single markers.
    """
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    by_name: dict[str, list[dict]] = {}
    for row in rows:
        by_name.setdefault(row["name"], []).append(row)
    for name in sorted(by_name):
        group = by_name[name]
        scales = [r.get("scale") for r in group]
        sws = [r["sw_to_data"] for r in group]
        if len(group) > 1 and all(s is not None for s in scales):
            order = sorted(range(len(group)), key=lambda i: scales[i])
            ax.plot([scales[i] for i in order], [sws[i] for i in order],
                    marker="o", markersize=4, label=name)
        else:
            xs = [s if s is not None else 0.0 for s in scales]
            ax.plot(xs, sws, marker="s", markersize=5, linestyle="none", label=name)
    ax.set_xlabel("guidance scale")
    ax.set_ylabel("sliced W2 to data")
    if any(r["sw_to_data"] > 0 for r in rows):
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)


def render_deviation_curve(points: list[tuple[float, float]], out_path) -> None:
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    if points:
        ts = [p[0] for p in points]
        sws = [p[1] for p in points]
        ax.plot(ts, sws, marker="o", markersize=4)
    ax.set_xlabel("t")
    ax.set_ylabel("sliced W2 to reference")
    ax.invert_xaxis()
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
