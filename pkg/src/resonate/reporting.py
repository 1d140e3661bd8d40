"""CSV, JSON and SVG output helpers shared by the pipeline commands.

SVG plots are emitted directly (deterministic, diffable); CSV floats use repr
so identical runs produce bitwise-identical files.
"""

from __future__ import annotations

import json

import numpy as np


def fit_line(x, y):
    """Least-squares line y = a x + b; returns (a, b, rms_residual)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least 2 points to fit a line")
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), float(coef[1]), resid


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, complex):
        return f"{v.real!r}{'+' if v.imag >= 0 else '-'}{abs(v.imag)!r}j"
    return str(v)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return {"re": o.real, "im": o.imag}
    raise TypeError(f"not JSON serializable: {type(o)}")


def svg_plot(path, series, title="", xlabel="", ylabel="", width=640, height=480):
    """Minimal line/point plot.  ``series`` is a list of dicts with keys
    x, y, label, and optional style 'line' | 'points' | 'dashed'."""
    margin = 60
    xs = np.concatenate([np.asarray(s["x"], dtype=float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], dtype=float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pad_x, pad_y = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
    x0, x1, y0, y1 = x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y

    def sx(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
             f'font-size="14">{title}</text>',
             f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
             f'font-size="12">{xlabel}</text>',
             f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 16 {height / 2:.1f})">{ylabel}</text>',
             f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
             f'height="{height - 2 * margin}" fill="none" stroke="#888"/>']
    for k, s in enumerate(series):
        color = colors[k % len(colors)]
        px = [sx(v) for v in np.asarray(s["x"], dtype=float)]
        py = [sy(v) for v in np.asarray(s["y"], dtype=float)]
        style = s.get("style", "line")
        if style in ("line", "dashed"):
            d = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
            dash = ' stroke-dasharray="6,4"' if style == "dashed" else ""
            parts.append(f'<polyline points="{d}" fill="none" stroke="{color}"'
                         f' stroke-width="1.5"{dash}/>')
        if style == "points" or s.get("markers", style == "line"):
            for a, b in zip(px, py):
                parts.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>')
        label = s.get("label")
        if label:
            yleg = margin + 16 + 16 * k
            parts.append(f'<line x1="{width - margin - 90}" y1="{yleg - 4}" '
                         f'x2="{width - margin - 70}" y2="{yleg - 4}" stroke="{color}" '
                         f'stroke-width="2"/>')
            parts.append(f'<text x="{width - margin - 64}" y="{yleg}" '
                         f'font-size="11">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def svg_mesh_signs(path, mesh, signs, width=640, height=640):
    """Render per-element sign labels (+1, -1, 0=band) with component colors."""
    v = mesh.vertices
    x0, y0 = v.min(axis=0)
    x1, y1 = v.max(axis=0)
    scale = (min(width, height) - 40) / max(x1 - x0, y1 - y0)

    def pt(p):
        return (20 + (p[0] - x0) * scale, height - 20 - (p[1] - y0) * scale)

    cmap = {1: "#e4572e", -1: "#17bebb", 0: "#dddddd"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for tri, s in zip(mesh.triangles, signs):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (pt(v[i]) for i in tri))
        parts.append(f'<polygon points="{pts}" fill="{cmap[int(s)]}" '
                     f'stroke="#777" stroke-width="0.2"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
