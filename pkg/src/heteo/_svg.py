"""Minimal deterministic SVG 1.1 scatter plots (no plotting dependency,
stable bytes for reproducible artifacts)."""

from __future__ import annotations

import math


def _fmt(x):
    return f"{x:.3f}".rstrip("0").rstrip(".")


def color_ramp(t):
    """Linear blue (low) -> yellow (high), t in [0, 1]."""
    t = min(max(t, 0.0), 1.0)
    r = int(round(38 + t * (253 - 38)))
    g = int(round(70 + t * (231 - 70)))
    b = int(round(160 + t * (37 - 160)))
    return f"#{r:02x}{g:02x}{b:02x}"


class ScatterPlot:
    def __init__(self, width=480, height=360, margin=54, title="",
                 xlabel="", ylabel=""):
        self.width = width
        self.height = height
        self.margin = margin
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.groups = []  # (xs, ys, color, label)

    def add(self, xs, ys, color, label=""):
        self.groups.append((list(xs), list(ys), color, label))

    def _bounds(self):
        all_x = [x for xs, _, _, _ in self.groups for x in xs]
        all_y = [y for _, ys, _, _ in self.groups for y in ys]
        if not all_x:
            return 0.0, 1.0, 0.0, 1.0
        x0, x1 = min(all_x), max(all_x)
        y0, y1 = min(all_y), max(all_y)
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x0 + 0.5
        if y1 <= y0:
            y0, y1 = y0 - 0.5, y0 + 0.5
        return x0, x1, y0, y1

    def render(self):
        m = self.margin
        pw = self.width - 2 * m
        ph = self.height - 2 * m
        x0, x1, y0, y1 = self._bounds()

        def sx(x):
            return m + pw * (x - x0) / (x1 - x0)

        def sy(y):
            return self.height - m - ph * (y - y0) / (y1 - y0)

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
            f'width="{self.width}" height="{self.height}">',
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
            f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" '
            'fill="none" stroke="#333" stroke-width="1"/>',
        ]
        if self.title:
            parts.append(
                f'<text x="{self.width / 2:.1f}" y="{m - 16}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="14">{self.title}</text>'
            )
        for frac in (0.0, 0.5, 1.0):
            xv = x0 + frac * (x1 - x0)
            yv = y0 + frac * (y1 - y0)
            parts.append(
                f'<text x="{sx(xv):.1f}" y="{self.height - m + 18}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="11">{_fmt(xv)}</text>'
            )
            parts.append(
                f'<text x="{m - 8}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="11">{_fmt(yv)}</text>'
            )
        if self.xlabel:
            parts.append(
                f'<text x="{self.width / 2:.1f}" y="{self.height - 10}" '
                f'text-anchor="middle" font-family="sans-serif" font-size="12">'
                f"{self.xlabel}</text>"
            )
        if self.ylabel:
            parts.append(
                f'<text x="14" y="{self.height / 2:.1f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="12" '
                f'transform="rotate(-90 14 {self.height / 2:.1f})">{self.ylabel}</text>'
            )
        for xs, ys, color, _ in self.groups:
            for x, y in zip(xs, ys):
                if not (math.isfinite(x) and math.isfinite(y)):
                    continue
                parts.append(
                    f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3.5" '
                    f'fill="{color}" fill-opacity="0.8"/>'
                )
        legend_y = m + 14
        for _, _, color, label in self.groups:
            if not label:
                continue
            parts.append(
                f'<circle cx="{self.width - m - 90}" cy="{legend_y - 4}" r="4" fill="{color}"/>'
            )
            parts.append(
                f'<text x="{self.width - m - 80}" y="{legend_y}" '
                f'font-family="sans-serif" font-size="11">{label}</text>'
            )
            legend_y += 16
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())


def colored_point_map(lons, lats, values, title="effect map",
                      width=560, height=460, margin=54):
    """Geographic scatter with a blue->yellow value ramp and a legend bar."""
    vmin = min(values)
    vmax = max(values)
    degenerate = not vmax > vmin
    m = margin
    pw = width - 2 * m
    ph = height - 2 * m
    x0, x1 = min(lons), max(lons)
    y0, y1 = min(lats), max(lats)
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x0 + 0.5
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y0 + 0.5

    def sx(x):
        return m + pw * (x - x0) / (x1 - x0)

    def sy(y):
        return height - m - ph * (y - y0) / (y1 - y0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" '
        'fill="none" stroke="#333" stroke-width="1"/>',
        f'<text x="{width / 2:.1f}" y="{m - 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for lon, lat, v in zip(lons, lats, values):
        t = 0.5 if degenerate else (v - vmin) / (vmax - vmin)
        parts.append(
            f'<circle cx="{sx(lon):.2f}" cy="{sy(lat):.2f}" r="3.5" '
            f'fill="{color_ramp(t)}" fill-opacity="0.85"/>'
        )
    # legend: vertical ramp bar on the right margin
    bar_x = width - m + 12
    bar_h = ph // 2
    bar_y = m
    steps = 24
    for s in range(steps):
        t = 1.0 - s / (steps - 1)
        parts.append(
            f'<rect x="{bar_x}" y="{bar_y + s * bar_h / steps:.1f}" width="12" '
            f'height="{bar_h / steps + 0.5:.1f}" fill="{color_ramp(t)}"/>'
        )
    if degenerate:
        label_hi = label_lo = f"constant {_fmt(vmin)}"
    else:
        label_hi = _fmt(vmax)
        label_lo = _fmt(vmin)
    parts.append(
        f'<text x="{bar_x - 2}" y="{bar_y + 10}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{label_hi}</text>'
    )
    parts.append(
        f'<text x="{bar_x - 2}" y="{bar_y + bar_h}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{label_lo}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
