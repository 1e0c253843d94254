"""Deterministic hand-written SVG plots (960x540 viewBox).

Markers carry ``data-*`` attributes with their data-space values so plots can
be checked programmatically. Output depends only on the inputs: element order
is fixed and numbers are formatted to two decimals.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 960, 540
MARGIN = dict(left=80, right=30, top=50, bottom=60)
PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")


def _f(v):
    return f"{v:.2f}"


def _nice_range(lo, hi):
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    if lo == hi:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _ticks(lo, hi, n=5):
    step = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(step)) if step > 0 else 1.0
    for m in (1, 2, 5, 10):
        if step <= m * mag:
            step = m * mag
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(step):
        out.append(round(v, 10))
        v += step
    return out


class Canvas:
    def __init__(self, title, xlabel, ylabel, xrange, yrange, box=None):
        self.parts = []
        self.x0, self.x1 = xrange
        self.y0, self.y1 = yrange
        left, top, right, bottom = box or (
            MARGIN["left"], MARGIN["top"], WIDTH - MARGIN["right"], HEIGHT - MARGIN["bottom"])
        self.box = (left, top, right, bottom)
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x):
        left, _, right, _ = self.box
        return left + (x - self.x0) / (self.x1 - self.x0) * (right - left)

    def py(self, y):
        _, top, _, bottom = self.box
        return bottom - (y - self.y0) / (self.y1 - self.y0) * (bottom - top)

    def axes(self, xticks=True, xticklabels=None):
        left, top, right, bottom = self.box
        p = self.parts
        p.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
                 'fill="none" stroke="#333" stroke-width="1"/>')
        for t in _ticks(self.y0, self.y1):
            y = self.py(t)
            p.append(f'<line x1="{left - 5}" y1="{_f(y)}" x2="{left}" y2="{_f(y)}" stroke="#333"/>')
            p.append(f'<text x="{left - 8}" y="{_f(y + 4)}" text-anchor="end" font-size="12">{t:g}</text>')
        if xticklabels is not None:
            for x, label in xticklabels:
                p.append(f'<text x="{_f(self.px(x))}" y="{bottom + 20}" text-anchor="middle" '
                         f'font-size="12">{escape(str(label))}</text>')
        elif xticks:
            for t in _ticks(self.x0, self.x1):
                x = self.px(t)
                p.append(f'<line x1="{_f(x)}" y1="{bottom}" x2="{_f(x)}" y2="{bottom + 5}" stroke="#333"/>')
                p.append(f'<text x="{_f(x)}" y="{bottom + 20}" text-anchor="middle" font-size="12">{t:g}</text>')
        p.append(f'<text x="{(left + right) / 2:.2f}" y="{bottom + 45}" text-anchor="middle" '
                 f'font-size="14">{escape(self.xlabel)}</text>')
        p.append(f'<text x="20" y="{(top + bottom) / 2:.2f}" text-anchor="middle" font-size="14" '
                 f'transform="rotate(-90 20 {(top + bottom) / 2:.2f})">{escape(self.ylabel)}</text>')
        p.append(f'<text x="{WIDTH / 2:.2f}" y="30" text-anchor="middle" font-size="16" '
                 f'font-weight="bold">{escape(self.title)}</text>')

    def circle(self, x, y, color, cls="point", /, **data):
        attrs = "".join(f' data-{k}="{escape(str(v), {chr(34): "&quot;"})}"' for k, v in data.items())
        self.parts.append(f'<circle class="{cls}" cx="{_f(self.px(x))}" cy="{_f(self.py(y))}" r="4" '
                          f'fill="{color}" fill-opacity="0.8"{attrs}/>')

    def line(self, xa, ya, xb, yb, color="#000", dash=None, width=1.5, cls="line"):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line class="{cls}" x1="{_f(self.px(xa))}" y1="{_f(self.py(ya))}" '
                          f'x2="{_f(self.px(xb))}" y2="{_f(self.py(yb))}" stroke="{color}" '
                          f'stroke-width="{width}"{d}/>')

    def polyline(self, xs, ys, color, cls="curve"):
        pts = " ".join(f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')

    def band(self, xs, lo, hi, color, cls="band"):
        pts = [f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(xs, hi)]
        pts += [f"{_f(self.px(x))},{_f(self.py(y))}" for x, y in zip(reversed(xs), reversed(lo))]
        self.parts.append(f'<polygon class="{cls}" points="{" ".join(pts)}" fill="{color}" '
                          'fill-opacity="0.25" stroke="none"/>')

    def legend(self, entries):
        _, top, right, _ = self.box
        for i, (label, color) in enumerate(entries):
            y = top + 15 + 18 * i
            self.parts.append(f'<rect x="{right - 160}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{right - 145}" y="{y}" font-size="12">{escape(str(label))}</text>')


def render(*canvases) -> str:
    body = []
    for c in canvases:
        body.extend(c.parts)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}">\n'
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>\n'
        + "\n".join(body) + "\n</svg>\n"
    )


def _jitter(i, n):
    # Deterministic spread in [-0.25, 0.25].
    if n <= 1:
        return 0.0
    return -0.25 + 0.5 * ((i * 0.618034) % 1.0)


def strip_plot(groups: dict, title, ylabel) -> str:
    """One column per group; ``groups`` maps label -> {point_id: value}."""
    labels = list(groups)
    vals = [v for g in groups.values() for v in g.values()]
    yr = _nice_range(min(vals, default=0.0), max(vals, default=1.0))
    c = Canvas(title, "model version", ylabel, (-0.5, len(labels) - 0.5), yr)
    c.axes(xticklabels=list(enumerate(labels)))
    for gi, label in enumerate(labels):
        color = PALETTE[gi % len(PALETTE)]
        items = sorted(groups[label].items())
        for i, (pid, v) in enumerate(items):
            c.circle(gi + _jitter(i, len(items)), v, color, group=label, id=pid, value=repr(v))
        if items:
            values = [v for _, v in items]
            m = math.fsum(values) / len(values)
            sd = math.sqrt(math.fsum((v - m) ** 2 for v in values) / (len(values) - 1)) if len(values) > 1 else 0.0
            c.line(gi - 0.35, m, gi + 0.35, m, color="#000", width=2.5, cls="mean")
            c.line(gi, m - sd, gi, m + sd, color="#000", width=1.0, cls="std")
            c.parts.append(f'<text x="{_f(c.px(gi))}" y="{_f(c.box[1] + 15)}" text-anchor="middle" '
                           f'font-size="12">{m:.2f} ± {sd:.2f}</text>')
    return render(c)


def scatter_identity(series: dict, title, xlabel, ylabel) -> str:
    """Scatter of (x, y) points per series with a dashed y = x line."""
    xs = [p[1] for pts in series.values() for p in pts]
    ys = [p[2] for pts in series.values() for p in pts]
    lo = min(xs + ys, default=0.0)
    hi = max(xs + ys, default=1.0)
    r = _nice_range(lo, hi)
    c = Canvas(title, xlabel, ylabel, r, r)
    c.axes()
    c.line(r[0], r[0], r[1], r[1], color="#000", dash="6,4", cls="identity")
    entries = []
    for si, (label, pts) in enumerate(series.items()):
        color = PALETTE[si % len(PALETTE)]
        entries.append((label, color))
        for pid, x, y in pts:
            c.circle(x, y, color, series=label, id=pid, x=repr(x), y=repr(y))
    c.legend(entries)
    return render(c)


def curves_with_band(slices, curves: dict, ratio_mean, ratio_std, title, ylabel) -> str:
    """Top panel: per-slice metric curves; bottom panel: scaling factor mean ± std."""
    top_box = (MARGIN["left"], MARGIN["top"], WIDTH - MARGIN["right"], 290)
    bot_box = (MARGIN["left"], 330, WIDTH - MARGIN["right"], HEIGHT - MARGIN["bottom"])
    xr = _nice_range(min(slices, default=0), max(slices, default=1))
    vals = [v for ys in curves.values() for v in ys]
    top = Canvas(title, "", ylabel, xr, _nice_range(min(vals, default=0.0), max(vals, default=1.0)), top_box)
    top.axes(xticks=False)
    entries = []
    for i, (label, ys) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        entries.append((label, color))
        top.polyline(slices, ys, color)
    top.legend(entries)

    lo = [m - s for m, s in zip(ratio_mean, ratio_std)]
    hi = [m + s for m, s in zip(ratio_mean, ratio_std)]
    yr = _nice_range(min(lo + [1.0]), max(hi + [1.0]))
    bot = Canvas("", "slice index", "scaling factor", xr, yr, bot_box)
    bot.title = ""
    bot.axes()
    if slices:
        bot.band(slices, lo, hi, "#7570b3")
        bot.polyline(slices, ratio_mean, "#7570b3", cls="ratio")
        bot.line(xr[0], 1.0, xr[1], 1.0, color="#000", dash="4,4", width=1.0, cls="unity")
        for s, m, sd in zip(slices, ratio_mean, ratio_std):
            bot.parts.append(f'<circle class="ratio-point" cx="{_f(bot.px(s))}" cy="{_f(bot.py(m))}" r="2" '
                             f'fill="#7570b3" data-slice="{s}" data-mean="{m!r}" data-std="{sd!r}"/>')
    return render(top, bot)
