"""SVG Gantt rendering of a simulation trace."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simulate import SimReport  # noqa: E402

COLORS = {
    "compute": "#4c72b0",
    "send": "#dd8452",
    "recv": "#dd8452",
    "collective": "#c44e52",
    "local": "#8c8c8c",
}


def gantt_svg(report: SimReport, path: str, title: str = "") -> None:
    """One lane per device; zero-length tasks are skipped."""
    plt.rcParams["svg.hashsalt"] = "parplan"
    devs = sorted(report.devices)
    fig, ax = plt.subplots(figsize=(10, 0.6 * max(len(devs), 1) + 1.2))
    span = report.makespan or 1.0
    for dev, task, kind, label, start, end in report.trace:
        if end <= start or kind not in COLORS:
            continue
        ax.broken_barh([(start, end - start)], (dev - 0.4, 0.8),
                       facecolors=COLORS[kind], edgecolor="white", linewidth=0.3)
        if (end - start) / span > 0.04:
            ax.text((start + end) / 2, dev, task, ha="center", va="center", fontsize=6,
                    color="white", clip_on=True)
    ax.set_yticks(devs)
    ax.set_yticklabels([f"dev{d}" for d in devs])
    ax.set_ylim(-0.6, max(devs, default=0) + 0.6)
    ax.set_xlim(0, span)
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    handles = [plt.Rectangle((0, 0), 1, 1, color=COLORS[k]) for k in ("compute", "send", "collective")]
    ax.legend(handles, ["compute", "point-to-point", "collective"], loc="upper right", fontsize=7)
    ax.set_title(title or f"makespan {report.makespan:.6g} s", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
