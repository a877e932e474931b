"""Minimal hand-written SVG: line charts and the covariance contour plot."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
W, H = 560, 400
PAD_L, PAD_R, PAD_T, PAD_B = 60, 150, 30, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if math.isfinite(v) else "0"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _doc(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def line_chart(x, series: dict[str, np.ndarray], title: str = "", xlabel: str = "", ylabel: str = "",
               ylim: tuple[float, float] | None = None, dashed: tuple[str, ...] = ()) -> str:
    """Polylines sharing one x axis; names in ``dashed`` are drawn dashed."""
    x = np.asarray(x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] or [np.zeros(1)])
    y0, y1 = ylim if ylim else (float(finite.min()), float(finite.max()))
    if y1 <= y0:
        y1 = y0 + 1.0
    x0, x1 = float(x.min()), float(x.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B

    def px(v):
        return PAD_L + (v - x0) / (x1 - x0) * pw

    def py(v):
        return PAD_T + ph - (min(max(v, y0), y1) - y0) / (y1 - y0) * ph

    body = [f'<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        body.append(f'<text x="{px(t):.1f}" y="{PAD_T + ph + 15}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        body.append(f'<line x1="{PAD_L}" x2="{PAD_L + pw}" y1="{py(t):.1f}" y2="{py(t):.1f}" stroke="#eee"/>')
        body.append(f'<text x="{PAD_L - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    body.append(f'<text x="{PAD_L + pw / 2:.0f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{PAD_T + ph / 2:.0f}" text-anchor="middle" '
                f'transform="rotate(-90 14 {PAD_T + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, (name, v) in enumerate(ys.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, v) if math.isfinite(b))
        dash = ' stroke-dasharray="5,4"' if name in dashed else ""
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
        ly = PAD_T + 14 + 16 * i
        body.append(f'<line x1="{W - PAD_R + 10}" x2="{W - PAD_R + 30}" y1="{ly - 4}" y2="{ly - 4}" '
                    f'stroke="{color}" stroke-width="2"{dash}/>')
        body.append(f'<text x="{W - PAD_R + 35}" y="{ly}">{escape(name)}</text>')
    return _doc(body, title)


def contour_plot(ellipses: dict[float, np.ndarray], weights: np.ndarray, title: str = "") -> str:
    """Noise ellipses centred at the origin with one arrow per weight vector."""
    pts = np.concatenate([e for e in ellipses.values()] + [np.zeros((1, 2))])
    wn = weights / np.maximum(np.linalg.norm(weights, axis=1, keepdims=True), 1e-300)
    reach = max(float(np.max(np.abs(pts))), 1e-12)
    arrows = wn * reach
    span = 1.1 * reach
    side = min(W - PAD_L - PAD_R, H - PAD_T - PAD_B)
    cx, cy = PAD_L + side / 2, PAD_T + side / 2

    def p(v):
        return cx + v[0] / span * side / 2, cy - v[1] / span * side / 2

    body = [f'<rect x="{PAD_L}" y="{PAD_T}" width="{side}" height="{side}" fill="none" stroke="#444"/>',
            f'<line x1="{PAD_L}" x2="{PAD_L + side}" y1="{cy}" y2="{cy}" stroke="#ddd"/>',
            f'<line x1="{cx}" x2="{cx}" y1="{PAD_T}" y2="{PAD_T + side}" stroke="#ddd"/>',
            '<defs><marker id="head" markerWidth="8" markerHeight="8" refX="7" refY="4" orient="auto">'
            '<path d="M0,0 L8,4 L0,8 z" fill="#d62728"/></marker></defs>']
    for k, e in sorted(ellipses.items()):
        path = " ".join(f"{a:.1f},{b:.1f}" for a, b in (p(v) for v in e))
        body.append(f'<polygon points="{path}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
        tx, ty = p(e[0])
        body.append(f'<text x="{tx + 4:.1f}" y="{ty - 4:.1f}" fill="#1f77b4">{_fmt(k)} sd</text>')
    for i, a in enumerate(arrows):
        x2, y2 = p(a)
        body.append(f'<line x1="{cx}" y1="{cy}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="#d62728" '
                    f'stroke-width="2" marker-end="url(#head)"/>')
        body.append(f'<text x="{x2 + 5:.1f}" y="{y2:.1f}" fill="#d62728">w{i}</text>')
    return _doc(body, title)
