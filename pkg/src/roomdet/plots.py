"""Dependency-free SVG line charts (polyline + axes, nothing fancy)."""

from xml.sax.saxutils import escape

MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 30, 46


def _span(values):
    lo = min(values)
    hi = max(values)
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def line_chart(xs, ys, title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 720, height: int = 440, stroke: str = "#1f6fb2") -> str:
    """Render one series as an SVG string."""
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    if len(xs) != len(ys):
        raise ValueError(f"series length mismatch: {len(xs)} vs {len(ys)}")
    x0, y0 = MARGIN_L, MARGIN_T
    x1, y1 = width - MARGIN_R, height - MARGIN_B
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>',
    ]
    if not xs:
        parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{(y0 + y1) / 2:.1f}" '
                     f'text-anchor="middle" fill="#888">no data</text>')
        parts.append("</svg>")
        return "\n".join(parts)

    xmin, xmax = _span(xs)
    ymin, ymax = _span(ys)

    def sx(v):
        return x0 + (v - xmin) / (xmax - xmin) * (x1 - x0)

    def sy(v):
        return y1 - (v - ymin) / (ymax - ymin) * (y1 - y0)

    for i in range(5):
        t = i / 4
        xv = xmin + t * (xmax - xmin)
        yv = ymin + t * (ymax - ymin)
        gx, gy = sx(xv), sy(yv)
        parts.append(f'<line x1="{gx:.1f}" y1="{y1}" x2="{gx:.1f}" y2="{y1 + 4}" stroke="black"/>')
        parts.append(f'<text x="{gx:.1f}" y="{y1 + 18}" text-anchor="middle">{xv:g}</text>')
        parts.append(f'<line x1="{x0 - 4}" y1="{gy:.1f}" x2="{x0}" y2="{gy:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{gy + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
        if i:
            parts.append(f'<line x1="{x0}" y1="{gy:.1f}" x2="{x1}" y2="{gy:.1f}" '
                         f'stroke="#ddd" stroke-width="0.5"/>')

    if len(xs) == 1:
        parts.append(f'<circle cx="{sx(xs[0]):.1f}" cy="{sy(ys[0]):.1f}" r="3" fill="{stroke}"/>')
    else:
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def save_line_chart(path, xs, ys, **kwargs) -> None:
    with open(path, "w") as f:
        f.write(line_chart(xs, ys, **kwargs))
