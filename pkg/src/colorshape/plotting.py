"""Dependency-free SVG control chart: two stacked CUSUM panels."""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, PANEL_H, MARGIN = 640, 200, 48


def _panel(y0, title, values, limit, signals):
    n = max(len(values), 1)
    top = max([limit] + list(values)) * 1.1 or 1.0
    x0, x1 = MARGIN, WIDTH - 16
    yb, yt = y0 + PANEL_H - 24, y0 + 20

    def px(i):
        return x0 + (x1 - x0) * (i / max(n - 1, 1))

    def py(v):
        return yb - (yb - yt) * (v / top)

    out = [
        f'<text x="{x0}" y="{y0 + 14}" font-size="13" font-family="sans-serif">{escape(title)}</text>',
        f'<rect x="{x0}" y="{yt}" width="{x1 - x0}" height="{yb - yt}" fill="none" stroke="#888"/>',
        f'<line x1="{x0}" y1="{py(limit):.2f}" x2="{x1}" y2="{py(limit):.2f}" '
        f'stroke="#c00" stroke-dasharray="6,3"/>',
        f'<text x="{x1 - 4}" y="{py(limit) - 4:.2f}" font-size="11" text-anchor="end" '
        f'fill="#c00" font-family="sans-serif">h = {limit:.3f}</text>',
    ]
    if values:
        pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(values))
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9a" stroke-width="1.5"/>')
    for i in signals:
        out.append(f'<circle cx="{px(i):.2f}" cy="{py(values[i]):.2f}" r="3.5" fill="#c00"/>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{yb + 18}" font-size="11" text-anchor="middle" '
               f'font-family="sans-serif">sample index (1..{len(values)})</text>')
    return out


def control_chart_svg(cs, cc, h_s, h_c, path=None):
    """Shape CUSUM on top, color CUSUM below; red dots where a chart is above its limit."""
    cs, cc = [float(v) for v in cs], [float(v) for v in cc]
    body = ['<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{2 * PANEL_H + 8}" '
            f'viewBox="0 0 {WIDTH} {2 * PANEL_H + 8}">',
            '<rect width="100%" height="100%" fill="white"/>']
    body += _panel(0, "Shape chart (eigenvalues)", cs, h_s, [i for i, v in enumerate(cs) if v > h_s])
    body += _panel(PANEL_H + 8, "Color chart (|coefficients|)", cc, h_c,
                   [i for i, v in enumerate(cc) if v > h_c])
    body.append("</svg>")
    text = "\n".join(body) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
