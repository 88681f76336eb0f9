"""Plain SVG figures written by hand so output is byte-stable.

Coordinates are formatted with fixed precision and elements are emitted in
input order, so identical inputs always give identical files.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import PlotError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def add(self, element: str) -> None:
        self.parts.append(element)

    def polyline(self, pts, color: str, width: float = 1.5, opacity: float = 1.0) -> None:
        coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.add(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                 f'stroke-width="{width}" stroke-opacity="{opacity}"/>')

    def rect(self, x, y, w, h, fill: str, stroke: str = "none") -> None:
        self.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}" stroke="{stroke}"/>')

    def circle(self, x, y, r, fill: str) -> None:
        self.add(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}"/>')

    def text(self, x, y, s: str, size: int = 12, anchor: str = "middle") -> None:
        s = s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}" '
                 f'font-family="sans-serif">{s}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        body = "\n".join(self.parts)
        return f'{head}\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'


def _mapper(lo, hi, x0, y0, size):
    """Map data box ``[lo, hi]^2`` to a square panel with origin top-left at (x0, y0)."""
    span = np.where(np.asarray(hi) - np.asarray(lo) > 0, np.asarray(hi) - np.asarray(lo), 1.0)

    def to_px(p):
        u = (p[0] - lo[0]) / span[0]
        v = (p[1] - lo[1]) / span[1]
        return x0 + u * size, y0 + (1.0 - v) * size

    return to_px


def _draw_walls(canvas: _Canvas, env, to_px) -> None:
    for w in getattr(env, "walls", ()):
        xa, ya = to_px((w.x0, w.y1))
        xb, yb = to_px((w.x1, w.y0))
        canvas.rect(xa, ya, xb - xa, yb - ya, "#bbbbbb")


def denoising_svg(snapshots: dict[int, np.ndarray], dims=(0, 1), bounds=None, env=None, panel: int = 180) -> str:
    """One panel per diffusion step ``i`` (largest first) showing the plan in ``dims``."""
    if not snapshots:
        raise PlotError("no snapshots to plot")
    steps = sorted(snapshots, reverse=True)
    if bounds is None:
        stacked = np.concatenate([np.asarray(snapshots[i])[:, list(dims)] for i in steps])
        bounds = (stacked.min(axis=0), stacked.max(axis=0))
    lo, hi = bounds
    pad = 20
    canvas = _Canvas(len(steps) * (panel + pad) + pad, panel + 2 * pad + 10)
    for k, i in enumerate(steps):
        x0 = pad + k * (panel + pad)
        canvas.add(f'<g id="snapshot-{i}">')
        canvas.rect(x0, pad, panel, panel, "none", "#333333")
        to_px = _mapper(lo, hi, x0, pad, panel)
        if env is not None:
            _draw_walls(canvas, env, to_px)
        pts = [to_px(p) for p in np.asarray(snapshots[i])[:, list(dims)]]
        canvas.polyline(pts, PALETTE[0])
        canvas.text(x0 + panel / 2, pad + panel + 18, f"i = {i}")
        canvas.add("</g>")
    return canvas.render()


def maze_overlay_svg(env, trajectories, plans=(), size: int = 400) -> str:
    """Executed paths (solid) and plans (faint) over the maze walls and goal."""
    trajectories = [np.asarray(t) for t in trajectories]
    if not trajectories:
        raise PlotError("no trajectories to plot")
    h = getattr(env, "half_size", 1.0)
    lo, hi = np.array([-h, -h]), np.array([h, h])
    pad = 20
    canvas = _Canvas(size + 2 * pad, size + 2 * pad)
    to_px = _mapper(lo, hi, pad, pad, size)
    canvas.rect(pad, pad, size, size, "none", "#333333")
    _draw_walls(canvas, env, to_px)
    goal = getattr(env, "goal", None)
    if goal is not None:
        gx, gy = to_px(goal)
        canvas.circle(gx, gy, max(3.0, env.goal_radius / (2 * h) * size), "#2ca02c")
    for k, plan in enumerate(plans):
        canvas.polyline([to_px(p) for p in np.asarray(plan)[:, :2]], PALETTE[k % len(PALETTE)], 1.0, 0.35)
    for k, traj in enumerate(trajectories):
        color = PALETTE[k % len(PALETTE)]
        pts = [to_px(p) for p in traj[:, :2]]
        canvas.polyline(pts, color)
        canvas.circle(*pts[0], 3.0, color)
    return canvas.render()


def sweep_svg(rows: list[dict], key: str = "success_rate", width: int = 420, height: int = 300) -> str:
    """Score against warm-start budget ``k``."""
    if not rows:
        raise PlotError("no sweep rows to plot")
    rows = sorted(rows, key=lambda r: r["k"])
    ks = np.array([float(r["k"]) for r in rows])
    ys = np.array([float(r[key]) for r in rows])
    ml, mr, mt, mb = 50, 20, 20, 40
    pw, ph = width - ml - mr, height - mt - mb
    k_lo, k_hi = ks.min(), ks.max()
    y_lo, y_hi = min(0.0, ys.min()), max(1.0, ys.max()) if key == "success_rate" else ys.max()
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    kspan = k_hi - k_lo if k_hi > k_lo else 1.0

    def to_px(k, y):
        return ml + (k - k_lo) / kspan * pw, mt + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    canvas = _Canvas(width, height)
    canvas.rect(ml, mt, pw, ph, "none", "#333333")
    pts = [to_px(k, y) for k, y in zip(ks, ys)]
    canvas.polyline(pts, PALETTE[0], 2.0)
    for (x, y), k in zip(pts, ks):
        canvas.circle(x, y, 3.5, PALETTE[0])
        canvas.text(x, mt + ph + 16, f"{int(k)}", 11)
    canvas.text(ml + pw / 2, height - 6, "warm-start steps k")
    canvas.text(12, mt + ph / 2, key.replace("_", " "), 11, "start")
    for frac in (0.0, 0.5, 1.0):
        y = y_lo + frac * (y_hi - y_lo)
        canvas.text(ml - 6, to_px(k_lo, y)[1] + 4, f"{y:.2f}", 10, "end")
    return canvas.render()


def write_svg(svg: str, path) -> None:
    """Write via a temp file so a failure never leaves a partial SVG behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(svg)
    tmp.replace(path)
