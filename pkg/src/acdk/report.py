"""Render training logs and robustness sweeps to text, CSV, figures, heatmaps.

Inputs are the JSON-lines files written by the training loop and the
robustness sweep. Outputs land in one directory: a plain-text metric grid
(rows = corruption kinds, columns = AbsRel/delta1 per severity), the same
rows as CSV, matplotlib figures for the loss curves and the robustness
grid, and optional query heatmaps of the spatial-distance relation exported
as PGM.
"""

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .imagecore import ImageBuffer, load_pfm, save_image  # noqa: E402
from .sdr import patchify, sdr_row_map  # noqa: E402

__all__ = ["read_jsonl", "write_grid", "write_csv", "plot_loss_curves",
           "plot_robustness", "export_heatmaps", "render_report"]

_PNG_META = {"Software": None}  # strip the version stamp: identical bytes


def read_jsonl(path):
    """Parse a JSON-lines file; malformed lines are reported by number."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {exc}")
    return rows


def _sweep_table(rows):
    kinds = []
    severities = []
    cells = {}
    for row in rows:
        kind = row["kind"]
        sev = int(row["severity"])
        if kind not in kinds:
            kinds.append(kind)
        if sev not in severities:
            severities.append(sev)
        cells[(kind, sev)] = row
    severities.sort()
    return kinds, severities, cells


def write_grid(rows, path):
    """Plain-text grid; cell values are echoed verbatim from the rows."""
    kinds, severities, cells = _sweep_table(rows)
    with open(path, "w") as f:
        if not rows:
            return
        headers = ["kind"]
        for sev in severities:
            headers += [f"s{sev}:absrel", f"s{sev}:delta1"]
        table = [headers]
        for kind in kinds:
            line = [kind]
            for sev in severities:
                row = cells.get((kind, sev))
                if row is None:
                    line += ["-", "-"]
                else:
                    line += [json.dumps(row["absrel"]), json.dumps(row["delta1"])]
            table.append(line)
        widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
        for line in table:
            f.write("  ".join(cell.ljust(w) for cell, w in zip(line, widths))
                    .rstrip() + "\n")


def write_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "severity", "absrel", "delta1"])
        for row in rows:
            writer.writerow([row["kind"], row["severity"],
                             row["absrel"], row["delta1"]])


def plot_loss_curves(steps, path):
    """Loss components over training steps, one panel per stage."""
    stages = []
    for row in steps:
        stage = row.get("stage", "finetune")
        if stage not in stages:
            stages.append(stage)
    fig, axes = plt.subplots(1, max(len(stages), 1),
                             figsize=(6 * max(len(stages), 1), 4), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        rows = [r for r in steps if r.get("stage", "finetune") == stage]
        xs = [r["step"] for r in rows]
        ax.plot(xs, [r["total"] for r in rows], label="total", lw=1.5)
        if stage != "pretrain":
            for key in ("lc", "lkd", "ls"):
                ax.plot(xs, [r[key] for r in rows], label=key, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(stage)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_robustness(rows, path):
    """AbsRel and delta1 versus severity, one curve per corruption kind."""
    kinds, severities, cells = _sweep_table(rows)
    fig, (ax_a, ax_d) = plt.subplots(1, 2, figsize=(11, 4))
    for kind in kinds:
        sev = [s for s in severities if (kind, s) in cells]
        ax_a.plot(sev, [cells[(kind, s)]["absrel"] for s in sev],
                  marker="o", label=kind)
        ax_d.plot(sev, [cells[(kind, s)]["delta1"] for s in sev],
                  marker="o", label=kind)
    ax_a.set_xlabel("severity")
    ax_a.set_ylabel("AbsRel (lower is better)")
    ax_d.set_xlabel("severity")
    ax_d.set_ylabel("delta1 (higher is better)")
    ax_d.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def export_heatmaps(disparity_path, queries, patch_size, metric, out_dir):
    """Write one PGM heat field per query patch of the given disparity map."""
    dmap = load_pfm(disparity_path)
    h = (dmap.height // patch_size) * patch_size
    w = (dmap.width // patch_size) * patch_size
    grid = patchify(dmap.data[:h, :w], patch_size)
    written = []
    for row, col in queries:
        heat = sdr_row_map(grid, (row, col), metric)
        name = f"sdr_query_{row}_{col}.pgm"
        save_image(ImageBuffer(heat[:, :, None]), os.path.join(out_dir, name))
        written.append(name)
    return written


def render_report(steps_path, sweep_path, out_dir, disparity_path=None,
                  queries=(), patch_size=14, metric="euclidean"):
    """Produce every report artifact; returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    sweep_rows = read_jsonl(sweep_path) if sweep_path else []
    grid_path = os.path.join(out_dir, "grid.txt")
    write_grid(sweep_rows, grid_path)
    written.append("grid.txt")
    write_csv(sweep_rows, os.path.join(out_dir, "sweep.csv"))
    written.append("sweep.csv")
    if sweep_rows:
        plot_robustness(sweep_rows, os.path.join(out_dir, "robustness.png"))
        written.append("robustness.png")
    if steps_path:
        steps = read_jsonl(steps_path)
        if steps:
            plot_loss_curves(steps, os.path.join(out_dir, "loss_curves.png"))
            written.append("loss_curves.png")
    if disparity_path and queries:
        written += export_heatmaps(disparity_path, queries, patch_size,
                                   metric, out_dir)
    return written
