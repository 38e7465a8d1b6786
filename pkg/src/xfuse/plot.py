"""Self-contained SVG renderings of an ROC curve and a confusion matrix."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .metrics import ConfusionMatrix, RocCurve

# plot area in SVG user units
LEFT, TOP, SIDE = 60.0, 20.0, 400.0
WIDTH, HEIGHT = LEFT + SIDE + 20.0, TOP + SIDE + 50.0


def to_svg_xy(fpr: float, tpr: float) -> tuple[float, float]:
    return round(LEFT + fpr * SIDE, 2), round(TOP + (1.0 - tpr) * SIDE, 2)


def curve_optimal_index(fpr: np.ndarray, tpr: np.ndarray) -> int:
    """Closest point to (0, 1) using rates only; first (largest threshold) wins ties."""
    d = np.asarray(fpr) ** 2 + (1.0 - np.asarray(tpr)) ** 2
    return int(np.argmin(d))


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def roc_svg(curve: RocCurve, optimal: int | None = None, title: str = "ROC") -> str:
    if optimal is None:
        optimal = curve_optimal_index(curve.fpr, curve.tpr)
    pts = [to_svg_xy(f, t) for f, t in zip(curve.fpr.tolist(), curve.tpr.tolist())]
    path = " ".join(("M" if i == 0 else "L") + f"{_num(x)},{_num(y)}" for i, (x, y) in enumerate(pts))
    ox, oy = pts[optimal]
    x0, y0 = to_svg_xy(0, 0)
    x1, y1 = to_svg_xy(1, 1)
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        tx, _ = to_svg_xy(v, 0)
        _, ty = to_svg_xy(0, v)
        ticks.append(f'<text x="{_num(tx)}" y="{_num(y0 + 16)}" text-anchor="middle">{v:g}</text>')
        ticks.append(f'<text x="{_num(x0 - 6)}" y="{_num(ty + 4)}" text-anchor="end">{v:g}</text>')
    thr = float(curve.thresholds[optimal])
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(WIDTH)}" height="{_num(HEIGHT)}" '
        f'viewBox="0 0 {_num(WIDTH)} {_num(HEIGHT)}" font-family="sans-serif" font-size="11">',
        f"<title>{escape(title)}</title>",
        f'<rect id="axes" x="{_num(x0)}" y="{_num(y1)}" width="{_num(SIDE)}" height="{_num(SIDE)}" '
        'fill="none" stroke="black"/>',
        f'<line id="diagonal" x1="{_num(x0)}" y1="{_num(y0)}" x2="{_num(x1)}" y2="{_num(y1)}" '
        'stroke="gray" stroke-dasharray="4 4"/>',
        f'<path id="curve" d="{path}" fill="none" stroke="#1f5fa8" stroke-width="2"/>',
        f'<circle id="optimal" cx="{_num(ox)}" cy="{_num(oy)}" r="5" fill="#c0392b" '
        f'data-threshold="{escape(repr(thr))}"/>',
        *ticks,
        f'<text x="{_num(LEFT + SIDE / 2)}" y="{_num(HEIGHT - 8)}" text-anchor="middle">false positive rate</text>',
        f'<text x="14" y="{_num(TOP + SIDE / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_num(TOP + SIDE / 2)})">true positive rate</text>',
        "</svg>",
    ]
    return "\n".join(lines) + "\n"


def confusion_svg(cm: ConfusionMatrix, threshold: float, title: str = "Confusion matrix") -> str:
    """2x2 grid, rows = true class, columns = predicted class (positive first)."""
    cell = 120.0
    x0, y0 = 110.0, 50.0
    cells = [(0, 0, "TP", cm.tp), (0, 1, "FN", cm.fn), (1, 0, "FP", cm.fp), (1, 1, "TN", cm.tn)]
    peak = max(cm.tp, cm.fn, cm.fp, cm.tn, 1)
    body = []
    for r, c, tag, n in cells:
        shade = int(round(235 - 160 * n / peak))
        x, y = x0 + c * cell, y0 + r * cell
        body.append(
            f'<rect id="{tag.lower()}" x="{_num(x)}" y="{_num(y)}" width="{_num(cell)}" height="{_num(cell)}" '
            f'fill="rgb({shade},{shade},255)" stroke="black"/>'
        )
        body.append(
            f'<text x="{_num(x + cell / 2)}" y="{_num(y + cell / 2 + 6)}" text-anchor="middle" '
            f'font-size="18">{n}</text>'
        )
        body.append(f'<text x="{_num(x + 6)}" y="{_num(y + 14)}">{tag}</text>')
    w, h = x0 + 2 * cell + 20, y0 + 2 * cell + 40
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(w)}" height="{_num(h)}" '
        f'viewBox="0 0 {_num(w)} {_num(h)}" font-family="sans-serif" font-size="12">',
        f"<title>{escape(title)}</title>",
        f'<text x="{_num(x0 + cell / 2)}" y="{_num(y0 - 10)}" text-anchor="middle">pred 1</text>',
        f'<text x="{_num(x0 + 1.5 * cell)}" y="{_num(y0 - 10)}" text-anchor="middle">pred 0</text>',
        f'<text x="{_num(x0 - 10)}" y="{_num(y0 + cell / 2)}" text-anchor="end">true 1</text>',
        f'<text x="{_num(x0 - 10)}" y="{_num(y0 + 1.5 * cell)}" text-anchor="end">true 0</text>',
        *body,
        f'<text x="{_num(x0 + cell)}" y="{_num(h - 12)}" text-anchor="middle">'
        f"threshold {escape(repr(float(threshold)))}</text>",
        "</svg>",
    ]
    return "\n".join(lines) + "\n"
