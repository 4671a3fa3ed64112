import math
import os
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape, quoteattr

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 50}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")
TICKS = 5

Series = Tuple[Sequence[float], Sequence[float]]


def _span(values: List[float]) -> Tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    low, high = min(finite), max(finite)
    if low == high:
        pad = abs(low) * 0.05 or 0.5
        return low - pad, high + pad
    return low, high


def _fmt(value: float) -> str:
    return "{:.4g}".format(value)


def line_plot(
    series: Dict[str, Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    errors: Optional[Dict[str, Sequence[float]]] = None,
) -> str:
    """
    Render named (x, y) polylines with axes, ticks and a legend as a
    standalone SVG document. `errors` adds symmetric error bars per point.
    """
    errors = errors or {}
    xs = [float(x) for xv, _ in series.values() for x in xv]
    ys = [float(y) for _, yv in series.values() for y in yv]
    for name, err in errors.items():
        ys += [float(y) + s * float(e) for y, e in zip(series[name][1], err) for s in (-1, 1)]
    x_low, x_high = _span(xs)
    y_low, y_high = _span(ys)

    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x_low) / (x_high - x_low) * plot_w

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y_low) / (y_high - y_low)) * plot_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" '
        'viewBox="0 0 {} {}">'.format(WIDTH, HEIGHT, WIDTH, HEIGHT),
        '<rect x="0" y="0" width="{}" height="{}" fill="white"/>'.format(WIDTH, HEIGHT),
    ]

    x0, y0 = MARGIN["left"], MARGIN["top"] + plot_h
    out.append(
        '<path d="M {x0} {top} L {x0} {y0} L {x1} {y0}" fill="none" stroke="black"/>'.format(
            x0=x0, top=MARGIN["top"], y0=y0, x1=x0 + plot_w
        )
    )
    for k in range(TICKS + 1):
        xv = x_low + (x_high - x_low) * k / TICKS
        yv = y_low + (y_high - y_low) * k / TICKS
        out.append(
            '<text x="{:.2f}" y="{}" font-size="11" text-anchor="middle">{}</text>'.format(
                px(xv), y0 + 16, escape(_fmt(xv))
            )
        )
        out.append(
            '<text x="{}" y="{:.2f}" font-size="11" text-anchor="end">{}</text>'.format(
                x0 - 6, py(yv) + 4, escape(_fmt(yv))
            )
        )

    for i, (name, (xv, yv)) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        points = [
            (px(float(x)), py(float(y)))
            for x, y in zip(xv, yv)
            if math.isfinite(float(x)) and math.isfinite(float(y))
        ]
        if points:
            out.append(
                '<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>'.format(
                    colour, " ".join("{:.2f},{:.2f}".format(a, b) for a, b in points)
                )
            )
        for x, y, e in zip(xv, yv, errors.get(name, ())):
            out.append(
                '<line x1="{x:.2f}" y1="{a:.2f}" x2="{x:.2f}" y2="{b:.2f}" stroke="{c}"/>'.format(
                    x=px(float(x)), a=py(float(y) - float(e)), b=py(float(y) + float(e)), c=colour
                )
            )
        legend_y = MARGIN["top"] + 16 * i
        out.append(
            '<text x="{}" y="{}" font-size="12" fill="{}">{}</text>'.format(
                x0 + plot_w + 12, legend_y + 4, colour, escape(name)
            )
        )

    out.append(
        '<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>'.format(
            MARGIN["left"] + plot_w / 2, escape(title)
        )
    )
    out.append(
        '<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>'.format(
            MARGIN["left"] + plot_w / 2, HEIGHT - 12, escape(xlabel)
        )
    )
    out.append(
        '<text x="16" y="{y}" font-size="12" text-anchor="middle" '
        "transform={t}>{label}</text>".format(
            y=MARGIN["top"] + plot_h / 2,
            t=quoteattr("rotate(-90 16 {})".format(MARGIN["top"] + plot_h / 2)),
            label=escape(ylabel),
        )
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str, document: str) -> None:
    tmp = "{}.partial".format(os.fspath(path))
    with open(tmp, "w", encoding="utf-8") as handle:
        handle.write(document)
    os.replace(tmp, path)
