"""Deterministic SVG bar charts of permutation importance."""

from xml.sax.saxutils import escape

WIDTH_PER_BAR = 56
MARGIN_LEFT = 64
MARGIN_RIGHT = 24
MARGIN_TOP = 48
PLOT_HEIGHT = 240
LABEL_SPACE = 96
BAR_FILL = "#3b6ea5"
NEG_FILL = "#c0504d"


def _f(x):
    # fixed precision keeps output byte-stable across platforms
    return f"{x:.2f}"


def render_bar_chart(scores, title="Permutation importance (decrease in accuracy, pp)"):
    """One bar per score; heights proportional to ``drop_pp``, negatives below the axis."""
    if not scores:
        raise ValueError("render_bar_chart needs at least one score")
    drops = [float(s.drop_pp) for s in scores]
    pos = max(0.0, max(drops))
    neg = max(0.0, -min(drops))
    span = pos + neg
    if span == 0:
        span, pos = 1.0, 1.0
    unit = PLOT_HEIGHT / span
    axis_y = MARGIN_TOP + pos * unit
    width = MARGIN_LEFT + WIDTH_PER_BAR * len(scores) + MARGIN_RIGHT
    height = MARGIN_TOP + PLOT_HEIGHT + LABEL_SPACE
    bar_w = WIDTH_PER_BAR * 0.7

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{_f(width / 2)}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for i, (score, d) in enumerate(zip(scores, drops)):
        x = MARGIN_LEFT + i * WIDTH_PER_BAR + (WIDTH_PER_BAR - bar_w) / 2
        h = abs(d) * unit
        y = axis_y - h if d >= 0 else axis_y
        fill = BAR_FILL if d >= 0 else NEG_FILL
        label = escape(score.band_set.label)
        cx = x + bar_w / 2
        out.append(
            f'<rect class="bar" data-label="{label}" x="{_f(x)}" y="{_f(y)}" '
            f'width="{_f(bar_w)}" height="{_f(h)}" fill="{fill}"/>'
        )
        vy = y - 4 if d >= 0 else y + h + 12
        out.append(f'<text x="{_f(cx)}" y="{_f(vy)}" text-anchor="middle">{d:.2f}</text>')
        ly = MARGIN_TOP + PLOT_HEIGHT + 14
        out.append(
            f'<text x="{_f(cx)}" y="{_f(ly)}" text-anchor="end" '
            f'transform="rotate(-45 {_f(cx)} {_f(ly)})">{label}</text>'
        )
    out.append(
        f'<line x1="{MARGIN_LEFT}" y1="{_f(axis_y)}" x2="{width - MARGIN_RIGHT}" '
        f'y2="{_f(axis_y)}" stroke="#000000" stroke-width="1"/>'
    )
    out.append(
        f'<text x="{MARGIN_LEFT - 8}" y="{_f(axis_y + 4)}" text-anchor="end">0</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"
