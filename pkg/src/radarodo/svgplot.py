"""Minimal hand-emitted SVG charts (polylines, axes, boxes) so the toolkit
carries no plotting dependency."""

import numpy as np

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f"]

_W, _H = 720, 480
_ML, _MR, _MT, _MB = 70, 20, 40, 55


def _ticks(lo, hi, n=6):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** np.floor(np.log10(raw))
    step = mag * min((m for m in (1, 2, 5, 10) if raw / mag <= m), default=10)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + step / 2, step)


def _fmt(x):
    return f"{x:.6g}"


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="13">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="22" text-anchor="middle" font-size="16">{title}</text>',
        ]
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        self._axes(xlabel, ylabel)

    def px(self, x):
        return _ML + (x - self.x0) / (self.x1 - self.x0) * (_W - _ML - _MR)

    def py(self, y):
        return _H - _MB - (y - self.y0) / (self.y1 - self.y0) * (_H - _MT - _MB)

    def _axes(self, xlabel, ylabel):
        self.parts.append(
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
            f'height="{_H - _MT - _MB}" fill="none" stroke="black"/>')
        for t in _ticks(self.x0, self.x1):
            if self.x0 <= t <= self.x1:
                x = self.px(t)
                self.parts.append(f'<line x1="{x:.1f}" y1="{_H - _MB}" x2="{x:.1f}" '
                                  f'y2="{_H - _MB + 5}" stroke="black"/>')
                self.parts.append(f'<text x="{x:.1f}" y="{_H - _MB + 20}" '
                                  f'text-anchor="middle">{_fmt(t)}</text>')
        for t in _ticks(self.y0, self.y1):
            if self.y0 <= t <= self.y1:
                y = self.py(t)
                self.parts.append(f'<line x1="{_ML - 5}" y1="{y:.1f}" x2="{_ML}" '
                                  f'y2="{y:.1f}" stroke="black"/>')
                self.parts.append(f'<text x="{_ML - 8}" y="{y + 4:.1f}" '
                                  f'text-anchor="end">{_fmt(t)}</text>')
        self.parts.append(f'<text x="{(_ML + _W - _MR) / 2}" y="{_H - 12}" '
                          f'text-anchor="middle">{xlabel}</text>')
        self.parts.append(f'<text x="18" y="{(_MT + _H - _MB) / 2}" text-anchor="middle" '
                          f'transform="rotate(-90 18 {(_MT + _H - _MB) / 2})">{ylabel}</text>')

    def polyline(self, xs, ys, color):
        pts = " ".join(f"{self.px(x):.2f},{self.py(y):.2f}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                          f'stroke-width="1.5"/>')

    def legend(self, labels_colors):
        y = _MT + 16
        for label, color in labels_colors:
            self.parts.append(f'<line x1="{_W - _MR - 150}" y1="{y - 4}" '
                              f'x2="{_W - _MR - 125}" y2="{y - 4}" stroke="{color}" '
                              f'stroke-width="2"/>')
            self.parts.append(f'<text x="{_W - _MR - 120}" y="{y}">{label}</text>')
            y += 18

    def text(self, x, y, s, anchor="middle"):
        self.parts.append(f'<text x="{self.px(x):.1f}" y="{self.py(y) - 6:.1f}" '
                          f'text-anchor="{anchor}">{s}</text>')

    def save(self, path):
        self.parts.append("</svg>")
        with open(path, "w") as f:
            f.write("\n".join(self.parts) + "\n")


def line_chart(series, xlabel, ylabel, title, path):
    """series: {label: (xs, ys)}; one polyline per label."""
    xs_all = np.concatenate([np.asarray(x) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y) for _, y in series.values()])
    cv = _Canvas(title, xlabel, ylabel,
                 (xs_all.min(), xs_all.max()), (min(ys_all.min(), 0.0), ys_all.max()))
    legend = []
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        cv.polyline(xs, ys, color)
        legend.append((label, color))
    cv.legend(legend)
    cv.save(path)


def xy_plot(series, title, path):
    """Top-down trajectories, equal axis scales."""
    xs_all = np.concatenate([np.asarray(x) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y) for _, y in series.values()])
    cx, cy = xs_all.mean(), ys_all.mean()
    half = max(xs_all.max() - xs_all.min(), ys_all.max() - ys_all.min(), 1.0) / 2 * 1.1
    cv = _Canvas(title, "x [m]", "y [m]",
                 (cx - half, cx + half), (cy - half, cy + half))
    legend = []
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        cv.polyline(xs, ys, color)
        legend.append((label, color))
    cv.legend(legend)
    cv.save(path)


def box_summary(groups, ylabel, title, path):
    """Quartile boxes with whiskers; the median value is printed in the plot."""
    labels = list(groups)
    hi = max(float(np.max(v)) for v in groups.values() if len(v))
    cv = _Canvas(title, "", ylabel, (0.0, float(len(labels))), (0.0, hi * 1.15 + 1e-9))
    for k, label in enumerate(labels):
        v = np.asarray(groups[label], dtype=float)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        lo, top = float(v.min()), float(v.max())
        xc = k + 0.5
        color = _COLORS[k % len(_COLORS)]
        xl, xr = cv.px(xc - 0.18), cv.px(xc + 0.18)
        cv.parts.append(f'<line x1="{cv.px(xc):.1f}" y1="{cv.py(lo):.1f}" '
                        f'x2="{cv.px(xc):.1f}" y2="{cv.py(top):.1f}" stroke="{color}"/>')
        cv.parts.append(f'<rect x="{xl:.1f}" y="{cv.py(q3):.1f}" width="{xr - xl:.1f}" '
                        f'height="{cv.py(q1) - cv.py(q3):.1f}" fill="{color}" '
                        f'fill-opacity="0.35" stroke="{color}"/>')
        cv.parts.append(f'<line x1="{xl:.1f}" y1="{cv.py(med):.1f}" x2="{xr:.1f}" '
                        f'y2="{cv.py(med):.1f}" stroke="{color}" stroke-width="2"/>')
        cv.text(xc, med, f"{med:.3g}")
        cv.parts.append(f'<text x="{cv.px(xc):.1f}" y="{_H - _MB + 20}" '
                        f'text-anchor="middle">{label}</text>')
    cv.save(path)
