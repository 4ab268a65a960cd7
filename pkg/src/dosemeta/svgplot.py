"""Small self-contained SVG figures: curve fans, difference curves, histograms.

Writes plain SVG 1.1 with no external renderer; output is deterministic
(coordinates rounded to fixed precision) so figures can be diffed.
"""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 28, 46
MAX_SPAGHETTI = 120


class _Canvas:
    def __init__(self, xlim, ylim, title="", xlabel="", ylabel=""):
        self.xlim = xlim
        self.ylim = ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        ]
        if title:
            self.parts.append(
                f'<text x="{WIDTH / 2}" y="18" font-size="14" '
                f'text-anchor="middle" font-family="sans-serif">{title}</text>')
        if xlabel:
            self.parts.append(
                f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" font-size="12" '
                f'text-anchor="middle" font-family="sans-serif">{xlabel}</text>')
        if ylabel:
            x, y = 16, HEIGHT / 2
            self.parts.append(
                f'<text x="{x}" y="{y}" font-size="12" text-anchor="middle" '
                f'font-family="sans-serif" transform="rotate(-90 {x} {y})">{ylabel}</text>')

    def px(self, x):
        lo, hi = self.xlim
        frac = (x - lo) / (hi - lo) if hi > lo else 0.5
        return MARGIN_L + frac * (WIDTH - MARGIN_L - MARGIN_R)

    def py(self, y):
        lo, hi = self.ylim
        frac = (y - lo) / (hi - lo) if hi > lo else 0.5
        return HEIGHT - MARGIN_B - frac * (HEIGHT - MARGIN_T - MARGIN_B)

    def polyline(self, xs, ys, color="black", width=1.0, dash=None, opacity=None):
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs, ys))
        style = f'stroke="{color}" stroke-width="{width}" fill="none"'
        if dash:
            style += f' stroke-dasharray="{dash}"'
        if opacity is not None:
            style += f' stroke-opacity="{opacity}"'
        self.parts.append(f'<polyline points="{pts}" {style}/>')

    def circle(self, x, y, r=2.0, color="black"):
        self.parts.append(
            f'<circle cx="{self.px(x):.2f}" cy="{self.py(y):.2f}" r="{r}" fill="{color}"/>')

    def vline(self, x, color="black", width=1.5):
        self.parts.append(
            f'<line x1="{self.px(x):.2f}" y1="{MARGIN_T}" x2="{self.px(x):.2f}" '
            f'y2="{HEIGHT - MARGIN_B}" stroke="{color}" stroke-width="{width}"/>')

    def bar(self, x0, x1, height, color="#bbbbbb"):
        px0, px1 = self.px(x0), self.px(x1)
        py0, py1 = self.py(0.0), self.py(height)
        self.parts.append(
            f'<rect x="{px0:.2f}" y="{py1:.2f}" width="{px1 - px0:.2f}" '
            f'height="{py0 - py1:.2f}" fill="{color}" stroke="white" stroke-width="0.5"/>')

    def axes(self, n_ticks=5):
        x0, y0 = MARGIN_L, HEIGHT - MARGIN_B
        x1, y1 = WIDTH - MARGIN_R, MARGIN_T
        self.parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for t in np.linspace(*self.xlim, n_ticks):
            px = self.px(t)
            self.parts.append(
                f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 5}" stroke="black"/>')
            self.parts.append(
                f'<text x="{px:.2f}" y="{y0 + 18}" font-size="10" text-anchor="middle" '
                f'font-family="sans-serif">{t:g}</text>')
        for t in np.linspace(*self.ylim, n_ticks):
            py = self.py(t)
            self.parts.append(
                f'<line x1="{x0 - 5}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="black"/>')
            self.parts.append(
                f'<text x="{x0 - 8}" y="{py + 3:.2f}" font-size="10" text-anchor="end" '
                f'font-family="sans-serif">{t:.3g}</text>')

    def write(self, path):
        self.parts.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(self.parts))
            fh.write("\n")


def _spaghetti_indices(n_draws):
    if n_draws <= MAX_SPAGHETTI:
        return np.arange(n_draws)
    return np.linspace(0, n_draws - 1, MAX_SPAGHETTI).astype(int)


def curve_plot(curve, path, title="", observations=None, ylim=None):
    """Fan of posterior draw curves with mean, 95% band, and observed points.

    ``observations`` is an optional (doses, outcomes) pair rendered as
    points at the bottom/top of the frame.
    """
    grid = curve.grid
    if ylim is None:
        hi = max(float(curve.upper.max()) * 1.05, 0.05)
        lo = min(0.0, float(curve.lower.min()) * 1.05)
        ylim = (lo, hi)
    canvas = _Canvas((float(grid[0]), float(grid[-1])), ylim, title=title,
                     xlabel="cumulative dose (100mg equivalents)", ylabel="probability")
    for idx in _spaghetti_indices(curve.values.shape[0]):
        canvas.polyline(grid, curve.values[idx], color="#999999", width=0.6, opacity=0.5)
    canvas.polyline(grid, curve.mean, color="black", width=2.0)
    canvas.polyline(grid, curve.lower, color="black", width=1.2, dash="6,4")
    canvas.polyline(grid, curve.upper, color="black", width=1.2, dash="6,4")
    if observations is not None:
        doses, outcomes = observations
        y_low, y_high = ylim[0] + 0.01 * (ylim[1] - ylim[0]), ylim[1] - 0.01 * (ylim[1] - ylim[0])
        for dose, outcome in zip(doses, outcomes):
            if grid[0] <= dose <= grid[-1]:
                canvas.circle(dose, y_high if outcome else y_low, r=1.5, color="black")
    canvas.axes()
    canvas.write(path)


def difference_plot(curve, path, title=""):
    """Difference curve with a zero reference line."""
    grid = curve.grid
    span = max(float(np.abs(curve.values).max()), 0.02) * 1.1
    canvas = _Canvas((float(grid[0]), float(grid[-1])), (-span, span), title=title,
                     xlabel="cumulative dose (100mg equivalents)",
                     ylabel="probability difference")
    canvas.polyline(grid, np.zeros_like(grid), color="#cccccc", width=1.0)
    for idx in _spaghetti_indices(curve.values.shape[0]):
        canvas.polyline(grid, curve.values[idx], color="#999999", width=0.6, opacity=0.5)
    canvas.polyline(grid, curve.mean, color="black", width=2.0)
    canvas.polyline(grid, curve.lower, color="black", width=1.2, dash="6,4")
    canvas.polyline(grid, curve.upper, color="black", width=1.2, dash="6,4")
    canvas.axes()
    canvas.write(path)


def histogram_plot(values, observed, path, title="", n_bins=30):
    """Replicated-statistic histogram with the observed value marked."""
    values = np.asarray(values, dtype=float)
    lo = min(values.min(), observed)
    hi = max(values.max(), observed)
    pad = 0.05 * (hi - lo) if hi > lo else max(0.05 * abs(hi), 0.01)
    lo, hi = lo - pad, hi + pad
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    density = counts / counts.max() if counts.max() else counts
    canvas = _Canvas((lo, hi), (0.0, 1.08), title=title,
                     xlabel="replicated statistic", ylabel="relative frequency")
    for b in range(n_bins):
        if counts[b]:
            canvas.bar(edges[b], edges[b + 1], density[b])
    canvas.vline(observed, color="black", width=2.0)
    canvas.axes()
    canvas.write(path)
