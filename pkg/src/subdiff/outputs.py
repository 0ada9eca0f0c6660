"""CSV, JSON and minimal SVG line-plot writers for experiment results."""

from __future__ import annotations

import json
import math
from html import escape
from pathlib import Path

import numpy as np

__all__ = ["emit_outputs", "line_plot_svg", "write_json"]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_intensity_csv(path, t, true, recovered) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,lambda_true,lambda_recovered\n")
        for row in zip(t, true, recovered):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def line_plot_svg(series, title: str = "", xlabel: str = "", ylabel: str = "",
                  logy: bool = False, width: int = 480, height: int = 320) -> str:
    """Render ``[(label, x, y), ...]`` as a standalone SVG document."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def ty(v):
        return np.log10(np.maximum(v, 1e-300)) if logy else v

    pts = [(np.asarray(x, float), ty(np.asarray(y, float))) for _, x, y in series if len(x)]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if pts:
        xs = np.concatenate([p[0] for p in pts])
        ys = np.concatenate([p[1] for p in pts])
        ok = np.isfinite(ys)
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = (float(ys[ok].min()), float(ys[ok].max())) if ok.any() else (0.0, 1.0)
        if x1 == x0:
            x1 = x0 + 1.0
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

        def sx(v):
            return ml + (v - x0) / (x1 - x0) * pw

        def sy(v):
            return mt + ph - (v - y0) / (y1 - y0) * ph

        for k in range(5):
            xv = x0 + k * (x1 - x0) / 4
            yv = y0 + k * (y1 - y0) / 4
            ylab = f"1e{yv:.1f}" if logy else f"{yv:.3g}"
            parts.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{xv:.3g}</text>')
            parts.append(f'<text x="{ml - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{ylab}</text>')
        for i, ((label, _, _), (x, y)) in enumerate(zip(series, pts)):
            c = colors[i % len(colors)]
            coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if math.isfinite(b))
            dash = ' stroke-dasharray="5,3"' if i % 2 else ""
            parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5"{dash} points="{coords}"/>')
            parts.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * i}" fill="{c}">{escape(label)}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(
        f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {mt + ph / 2})">{escape(ylabel)}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_outputs(history, params, truth, out_dir, grid, summary: dict | None = None) -> list[Path]:
    """Write summary.json, history.csv, intensity_<k>.csv and SVG plots to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    p = out / "history.csv"
    history.to_csv(p)
    written.append(p)

    t = grid.nodes
    for k in range(params.N):
        p = out / f"intensity_{k}.csv"
        write_intensity_csv(p, t, truth.intensities[k], params.intensities[k])
        written.append(p)
        p = out / f"intensity_{k}.svg"
        p.write_text(line_plot_svg(
            [("true", t, truth.intensities[k]), ("recovered", t, params.intensities[k])],
            title=f"source {k}: intensity", xlabel="t", ylabel="lambda",
        ), encoding="utf-8")
        written.append(p)

    if len(history):
        it = [r.iteration for r in history]
        p = out / "convergence.svg"
        p.write_text(line_plot_svg(
            [("location error", it, [r.location_error for r in history]),
             ("intensity error", it, [r.intensity_error for r in history])],
            title="error decay", xlabel="iteration", ylabel="log10 error", logy=True,
        ), encoding="utf-8")
        written.append(p)

    if summary is not None:
        p = out / "summary.json"
        write_json(p, summary)
        written.append(p)
    return written
