"""Run artifacts: delimited logs, JSON summaries, and quick-look figures.

Floats are written with repr so that a rerun with the same seed produces
byte-identical files.  Cells with nothing to report (the final row's
commanded velocities, the distance column on steps that were not audited)
stay empty rather than carrying sentinel numbers.
"""

from __future__ import annotations

import json
import os

import numpy as np


def _cell(x) -> str:
    return "" if x is None else repr(float(x))


def _omega_cells(omega, d):
    if omega is None:
        return [""] * (1 if d == 2 else 3)
    if d == 2:
        return [repr(float(omega))]
    return [repr(float(w)) for w in np.asarray(omega)]


def trajectory_header(d: int, mode: str) -> list:
    cols = ["t", "body_id"]
    cols += [f"p_{i}" for i in range(d)]
    cols += [f"R_{i}{j}" for i in range(d) for j in range(d)]
    cols += [f"v_{i}" for i in range(d)]
    cols += ["omega_0"] if d == 2 else ["omega_0", "omega_1", "omega_2"]
    if mode == "vehicle2d":
        cols += ["speed", "steering"]
    return cols


def write_trajectory_csv(log, path: str) -> str:
    """One row per (logged instant, body): pose plus the twist in play.

    Rigid-body rows carry the commanded twist of that control period
    (empty on the final row, which only closes the state history); vehicle
    rows carry the twist realized by the current speed and steering.
    """
    d, mode = log.d, log.mode
    lines = [",".join(trajectory_header(d, mode))]
    for t, row in zip(log.times, log.bodies):
        for body_id in log.body_ids:
            rec = row[body_id]
            cells = [repr(float(t)), str(body_id)]
            cells += [repr(float(x)) for x in rec.pose.p]
            cells += [repr(float(x)) for x in rec.pose.R.reshape(-1)]
            vel = rec.velocity
            if vel is None:
                cells += [""] * d + _omega_cells(None, d)
            else:
                cells += [repr(float(x)) for x in np.asarray(vel.v)]
                cells += _omega_cells(vel.omega, d)
            if mode == "vehicle2d":
                cells += [repr(float(rec.speed)), repr(float(rec.steering))]
            lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def pairs_header(d: int) -> list:
    return (["t", "owner", "other"] + [f"z_{i}" for i in range(d)]
            + ["h", "w_star"])


def write_pairs_csv(log, path: str) -> str:
    """One row per (logged instant, hyperplane channel).

    w_star is filled only on audited steps; elsewhere the cell is empty.
    """
    lines = [",".join(pairs_header(log.d))]
    for t, row in zip(log.times, log.pairs):
        for (i, j) in sorted(row):
            rec = row[(i, j)]
            cells = [repr(float(t)), str(i), str(j)]
            cells += [repr(float(x)) for x in rec.z]
            cells.append(repr(float(rec.h)))
            cells.append(_cell(rec.w_star))
            lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_json(payload: dict, path: str) -> str:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_bench_csv(rows, path: str) -> str:
    """rows: iterable of (n, median_ms, p95_ms)."""
    lines = ["n,median_ms,p95_ms"]
    for n, med, p95 in rows:
        lines.append(f"{n},{repr(float(med))},{repr(float(p95))}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# --- figures ---------------------------------------------------------------

MAX_PAIR_FIGURES = 16


def _ellipse_outline(pose, axes, n=120):
    ang = np.linspace(0.0, 2.0 * np.pi, n)
    ring = np.stack([axes[0] * np.cos(ang), axes[1] * np.sin(ang)])
    return (pose.p[:, None] + pose.R @ ring).T


def render_figures(log, outdir: str, scenario=None) -> list:
    """Quick-look plots next to the delimited output.

    Always: h_vs_t.png (every channel) and trajectory.png (body paths;
    final ellipse outlines in 2D when the scenario is at hand).  With at
    most MAX_PAIR_FIGURES channels, one SVG per pair overlays h with the
    audited distances.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    pair_keys = sorted(log.pairs[0]) if log.pairs else []
    t = np.asarray(log.times)

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in pair_keys:
        h = np.array([row[key].h for row in log.pairs])
        ax.plot(t, h, lw=1.0,
                label=f"{key[0]}-{key[1]}" if len(pair_keys) <= 8 else None)
    ax.axhline(0.0, color="k", ls="--", lw=0.8)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("h")
    ax.set_title("separation certificate per pair")
    if pair_keys and len(pair_keys) <= 8:
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(outdir, "h_vs_t.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    written.append(path)

    fig = plt.figure(figsize=(6, 6))
    if log.d == 3:
        ax = fig.add_subplot(projection="3d")
        for body_id in log.body_ids:
            pts = np.array([row[body_id].pose.p for row in log.bodies])
            ax.plot(pts[:, 0], pts[:, 1], pts[:, 2], lw=1.0)
            ax.scatter(*pts[0], marker="o", s=14)
            ax.scatter(*pts[-1], marker="x", s=20)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_zlabel("z")
    else:
        ax = fig.add_subplot()
        shapes = {}
        if scenario is not None:
            shapes = {b.id: b.shape for b in scenario.bodies}
        for body_id in log.body_ids:
            pts = np.array([row[body_id].pose.p for row in log.bodies])
            (line,) = ax.plot(pts[:, 0], pts[:, 1], lw=1.0)
            ax.plot(*pts[0], marker="o", ms=4, color=line.get_color())
            if body_id in shapes:
                ring = _ellipse_outline(log.bodies[-1][body_id].pose,
                                        shapes[body_id].q)
                ax.plot(ring[:, 0], ring[:, 1], lw=0.8,
                        color=line.get_color())
            else:
                ax.plot(*pts[-1], marker="x", ms=6, color=line.get_color())
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    ax.set_title("body paths")
    fig.tight_layout()
    path = os.path.join(outdir, "trajectory.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    written.append(path)

    if 0 < len(pair_keys) <= MAX_PAIR_FIGURES:
        for key in pair_keys:
            h = np.array([row[key].h for row in log.pairs])
            w = np.array([np.nan if row[key].w_star is None
                          else row[key].w_star for row in log.pairs])
            fig, ax = plt.subplots(figsize=(6, 3.2))
            ax.plot(t, h, lw=1.0, label="h")
            if np.any(np.isfinite(w)):
                keep = np.isfinite(w)
                ax.plot(t[keep], w[keep], ".", ms=3, label="audited w*")
            ax.axhline(0.0, color="k", ls="--", lw=0.8)
            ax.set_xlabel("t [s]")
            ax.set_ylabel("h")
            ax.set_title(f"pair {key[0]}-{key[1]}")
            ax.legend(fontsize=8)
            fig.tight_layout()
            path = os.path.join(outdir, f"pair_{key[0]}_{key[1]}.svg")
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written
