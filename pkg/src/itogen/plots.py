"""Best-effort SVG plot emission. CSV is the canonical output format;
these figures are conveniences (path overlays, marginal histograms,
coefficient traces) written without any plotting dependency."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

_W, _H = 760, 420
_ML, _MR, _MT, _MB = 55, 15, 30, 40


def _scale(lo: float, hi: float, size: int, margin0: int, margin1: int):
    span = hi - lo if hi > lo else 1.0

    def to_px(v):
        frac = (np.asarray(v) - lo) / span
        return margin0 + frac * (size - margin0 - margin1)

    return to_px


def _axes(title: str, xlim, ylim) -> List[str]:
    x0, x1 = _ML, _W - _MR
    y0, y1 = _H - _MB, _MT
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = xlim[0] + frac * (xlim[1] - xlim[0])
        yv = ylim[0] + frac * (ylim[1] - ylim[0])
        xp = x0 + frac * (x1 - x0)
        yp = y0 - frac * (y0 - y1)
        parts.append(f'<text x="{xp:.1f}" y="{y0 + 18}" text-anchor="middle" '
                     f'font-size="11">{xv:.3g}</text>')
        parts.append(f'<text x="{x0 - 8}" y="{yp:.1f}" text-anchor="end" '
                     f'font-size="11">{yv:.3g}</text>')
    return parts


def _polyline(xs_px, ys_px, color: str, width: float = 0.7,
              opacity: float = 1.0) -> str:
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs_px, ys_px))
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}" stroke-opacity="{opacity}"/>')


def paths_overlay_svg(groups: Sequence[Tuple[str, np.ndarray, np.ndarray, str]],
                      path: str, title: str, max_paths: int = 1000) -> None:
    """Overlay of sample paths; `groups` holds
    (label, times[t], values[n, t], color); groups may use different
    grids."""
    all_vals = np.concatenate([g[2][:max_paths].reshape(-1) for g in groups])
    all_times = np.concatenate([g[1] for g in groups])
    ylim = (float(np.min(all_vals)), float(np.max(all_vals)))
    xlim = (float(np.min(all_times)), float(np.max(all_times)))
    to_x = _scale(*xlim, _W, _ML, _MR)
    to_y = _scale(*ylim, _H, _MB, _MT)
    parts = _axes(title, xlim, ylim)
    for li, (label, times, vals, color) in enumerate(groups):
        for row in vals[:max_paths]:
            parts.append(_polyline(to_x(times), _H - to_y(row), color,
                                   opacity=0.25))
        parts.append(f'<text x="{_W - 150}" y="{35 + 16 * li}" fill="{color}" '
                     f'font-size="12">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def histogram_svg(edges: np.ndarray, counts: Sequence[Tuple[str, np.ndarray, str]],
                  path: str, title: str) -> None:
    """Side-by-side density histograms on shared bins."""
    max_density = 0.0
    dens = []
    widths = np.diff(edges)
    for label, c, color in counts:
        d = c / max(c.sum(), 1) / widths
        dens.append((label, d, color))
        max_density = max(max_density, float(d.max(initial=0.0)))
    xlim = (float(edges[0]), float(edges[-1]))
    ylim = (0.0, max_density if max_density > 0 else 1.0)
    to_x = _scale(*xlim, _W, _ML, _MR)
    to_y = _scale(*ylim, _H, _MB, _MT)
    parts = _axes(title, xlim, ylim)
    for li, (label, d, color) in enumerate(dens):
        for j, v in enumerate(d):
            x0, x1 = to_x(edges[j]), to_x(edges[j + 1])
            y = _H - to_y(v)
            base = _H - to_y(0.0)
            parts.append(f'<rect x="{x0:.1f}" y="{y:.1f}" '
                         f'width="{x1 - x0:.1f}" height="{base - y:.1f}" '
                         f'fill="{color}" fill-opacity="0.45"/>')
        parts.append(f'<text x="{_W - 150}" y="{35 + 16 * li}" fill="{color}" '
                     f'font-size="12">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def coefficient_trace_svg(times: np.ndarray,
                          series: Sequence[Tuple[str, np.ndarray, str]],
                          path: str, title: str) -> None:
    """Estimated vs. true coefficients along one path."""
    all_vals = np.concatenate([np.asarray(s[1]).reshape(-1) for s in series])
    ylim = (float(np.min(all_vals)), float(np.max(all_vals)))
    xlim = (float(times[0]), float(times[-1]))
    to_x = _scale(*xlim, _W, _ML, _MR)
    to_y = _scale(*ylim, _H, _MB, _MT)
    parts = _axes(title, xlim, ylim)
    for li, (label, vals, color) in enumerate(series):
        parts.append(_polyline(to_x(times), _H - to_y(np.asarray(vals)),
                               color, width=1.4))
        parts.append(f'<text x="{_W - 180}" y="{35 + 16 * li}" fill="{color}" '
                     f'font-size="12">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
