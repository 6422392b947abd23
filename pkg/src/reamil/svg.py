"""Minimal SVG writers for K-curves and tile overlays.

Output is plain text with fixed numeric formatting, so identical inputs
give identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = 48
SELECTED_STROKE = "#1a9641"


def _f(x: float) -> str:
    return f"{float(x):.2f}"


def _header(w: int, h: int) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
    ]


def gate_color(g: float) -> str:
    """White (0) to dark red (1)."""
    g = min(max(float(g), 0.0), 1.0)
    r = 255 - int(round(90 * g))
    gb = 255 - int(round(255 * g))
    return f"#{r:02x}{gb:02x}{gb:02x}"


def kcurve_svg(k: np.ndarray, mean: np.ndarray, std: np.ndarray, n_tiles: int,
               msk_mean: float | None = None, tau: float | None = None, title: str = "") -> str:
    """Mean K-curve with a shaded +/- 1 std band; dashed vertical line at the mean MSK."""
    k = np.asarray(k, dtype=np.float64)
    x0, x1 = MARGIN, WIDTH - MARGIN / 2
    y0, y1 = HEIGHT - MARGIN, MARGIN / 2
    kmax = max(float(k.max()), 1.0)

    def px(v):
        return x0 + (v / kmax) * (x1 - x0)

    def py(v):
        return y0 + float(np.clip(v, 0.0, 1.0)) * (y1 - y0)

    lo, hi = mean - std, mean + std
    band = [f"{_f(px(a))},{_f(py(b))}" for a, b in zip(k, hi)]
    band += [f"{_f(px(a))},{_f(py(b))}" for a, b in zip(k[::-1], lo[::-1])]
    line = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(k, mean))
    out = _header(WIDTH, HEIGHT)
    out.append(f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y0)}" stroke="black"/>')
    out.append(f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x0)}" y2="{_f(y1)}" stroke="black"/>')
    for t in (0.0, 0.5, 1.0):
        out.append(f'<text x="{_f(x0 - 6)}" y="{_f(py(t) + 4)}" font-size="10" text-anchor="end">{t:.1f}</text>')
    for t in (1, int(kmax)):
        out.append(f'<text x="{_f(px(t))}" y="{_f(y0 + 14)}" font-size="10" text-anchor="middle">{t}</text>')
    out.append(f'<text x="{_f((x0 + x1) / 2)}" y="{_f(HEIGHT - 8)}" font-size="11" text-anchor="middle">K (tiles kept)</text>')
    out.append(f'<text x="12" y="{_f((y0 + y1) / 2)}" font-size="11" transform="rotate(-90 12 {_f((y0 + y1) / 2)})" text-anchor="middle">p_y(K)</text>')
    out.append(f'<polygon points="{" ".join(band)}" fill="#4a7ab7" fill-opacity="0.25" stroke="none"/>')
    out.append(f'<polyline points="{line}" fill="none" stroke="#1f4e8c" stroke-width="2"/>')
    if tau is not None:
        out.append(f'<line x1="{_f(x0)}" y1="{_f(py(tau))}" x2="{_f(x1)}" y2="{_f(py(tau))}" stroke="gray" stroke-dasharray="2,3"/>')
    if msk_mean is not None and np.isfinite(msk_mean):
        out.append(f'<line x1="{_f(px(msk_mean))}" y1="{_f(y0)}" x2="{_f(px(msk_mean))}" y2="{_f(y1)}" '
                   f'stroke="#d7191c" stroke-dasharray="6,4"/>')
        out.append(f'<text x="{_f(px(msk_mean) + 4)}" y="{_f(y1 + 12)}" font-size="10" fill="#d7191c">mean MSK {msk_mean:.2f}</text>')
    if title:
        out.append(f'<text x="{_f((x0 + x1) / 2)}" y="14" font-size="12" text-anchor="middle">{_escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def overlay_svg(coords: np.ndarray, gates: np.ndarray, selected: np.ndarray, tile_size: float,
                extent: tuple[float, float, float, float] | None = None, title: str = "") -> str:
    """Tiles as squares at their coordinates, filled by gate; selected tiles outlined in green."""
    coords = np.asarray(coords, dtype=np.float64)
    if extent is None:
        lo = coords.min(axis=0)
        hi = coords.max(axis=0) + tile_size
        extent = (lo[0], lo[1], hi[0], hi[1])
    ux0, uy0, ux1, uy1 = extent
    span = max(ux1 - ux0, uy1 - uy0, 1e-9)
    scale = (WIDTH - 2 * 16) / span
    h = int(round((uy1 - uy0) * scale)) + 2 * 16 + (16 if title else 0)
    top = 16 + (16 if title else 0)
    sel = set(np.asarray(selected, dtype=np.int64).tolist())
    out = _header(WIDTH, h)
    if title:
        out.append(f'<text x="{WIDTH // 2}" y="18" font-size="12" text-anchor="middle">{_escape(title)}</text>')
    side = tile_size * scale
    for i, (u, v) in enumerate(coords):
        x = 16 + (u - ux0) * scale
        y = top + (v - uy0) * scale
        out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(side)}" height="{_f(side)}" '
                   f'fill="{gate_color(gates[i])}" stroke="#bbbbbb" stroke-width="0.5"/>')
    for i in sorted(sel):
        u, v = coords[i]
        x = 16 + (u - ux0) * scale
        y = top + (v - uy0) * scale
        out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(side)}" height="{_f(side)}" '
                   f'fill="none" stroke="{SELECTED_STROKE}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write(path, text: str) -> None:
    Path(path).write_text(text)
