"""Self-contained SVG emitters: scene overlays and sweep curves.

Plain string assembly, no plotting dependency; output files are valid
standalone SVG documents.
"""

from __future__ import annotations

import numpy as np

from .sdf import Disk, Rect

__all__ = ["svg_scene_trajectories", "svg_curves"]

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf"]


def _header(width, height):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n')


def svg_scene_trajectories(path, scene, trajectories=(), labels=(),
                           size: int = 480):
    """Scene outline with trajectory overlays and start/goal markers."""
    lo = np.asarray(scene.bounds[0])
    hi = np.asarray(scene.bounds[1])
    span = float((hi - lo).max())
    pad = 20

    def to_px(p):
        p = np.asarray(p, dtype=np.float64)
        x = pad + (p[..., 0] - lo[0]) / span * size
        y = pad + (hi[1] - p[..., 1]) / span * size  # y up
        return x, y

    parts = [_header(size + 2 * pad, size + 2 * pad)]
    x0, y1 = to_px(lo)
    x1, y0 = to_px(hi)
    parts.append(f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{x1 - x0:.1f}" '
                 f'height="{y1 - y0:.1f}" fill="none" stroke="black"/>\n')
    for obs in scene.obstacles:
        if isinstance(obs, Disk):
            cx, cy = to_px(np.asarray(obs.center))
            r = obs.radius / span * size
            parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{r:.1f}" '
                         f'fill="#bbbbbb" stroke="#555555"/>\n')
        elif isinstance(obs, Rect):
            rx, ry = to_px(np.array([obs.lo[0], obs.hi[1]]))
            w = 2 * obs.half[0] / span * size
            h = 2 * obs.half[1] / span * size
            parts.append(f'<rect x="{rx:.1f}" y="{ry:.1f}" width="{w:.1f}" '
                         f'height="{h:.1f}" fill="#bbbbbb" stroke="#555555"/>\n')
    for k, traj in enumerate(trajectories):
        traj = np.asarray(traj)
        xs, ys = to_px(traj)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        color = _COLORS[k % len(_COLORS)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5" opacity="0.8"/>\n')
        if k < len(labels):
            parts.append(f'<text x="{pad}" y="{pad + 14 * (k + 1)}" '
                         f'fill="{color}" font-size="12">{labels[k]}</text>\n')
    if scene.start.shape == (2,):
        sx, sy = to_px(scene.start)
        gx, gy = to_px(scene.goal)
        parts.append(f'<circle cx="{sx:.1f}" cy="{sy:.1f}" r="5" fill="#2ca02c"/>\n')
        parts.append(f'<circle cx="{gx:.1f}" cy="{gy:.1f}" r="5" fill="#d62728"/>\n')
    parts.append("</svg>\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))


def svg_curves(path, xs, series: dict, xlabel: str = "", ylabel: str = "",
               width: int = 520, height: int = 360, logx: bool = False):
    """Line chart of one or more named series over shared x values."""
    xs = np.asarray(xs, dtype=np.float64)
    if logx:
        xs = np.log10(xs)
    pad = 48
    all_y = np.concatenate([np.asarray(v, dtype=np.float64)
                            for v in series.values()])
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    x_lo, x_hi = float(xs.min()), float(xs.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def to_px(x, y):
        px = pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)
        py = height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)
        return px, py

    parts = [_header(width, height)]
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
                 f'y2="{height - pad}" stroke="black"/>\n')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" '
                 f'y2="{height - pad}" stroke="black"/>\n')
    parts.append(f'<text x="{width // 2}" y="{height - 10}" font-size="12" '
                 f'text-anchor="middle">{xlabel}</text>\n')
    parts.append(f'<text x="14" y="{height // 2}" font-size="12" '
                 f'transform="rotate(-90 14 {height // 2})" '
                 f'text-anchor="middle">{ylabel}</text>\n')
    for k, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=np.float64)
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join("%.1f,%.1f" % to_px(x, y) for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>\n')
        for x, y in zip(xs, ys):
            px, py = to_px(x, y)
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" '
                         f'fill="{color}"/>\n')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 16 * k}" '
                     f'fill="{color}" font-size="12">{name}</text>\n')
    parts.append("</svg>\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))
