"""Render the evaluation CSV tables as small self-contained SVG charts.

Output depends only on the CSV contents (no timestamps, fixed float formatting),
so re-rendering identical tables yields identical bytes.
"""
from __future__ import annotations

import csv
from collections import OrderedDict
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"]
LABEL_ORDER = ["Correct", "Error", "Undertranslation", "StronglyDetached", "Oscillatory", "FullyDetached"]


class ReportError(ValueError):
    pass


def _n(x: float) -> str:
    return f"{x:.2f}"


class Svg:
    def __init__(self, width: int, height: int, title: str):
        self.width, self.height = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]
        self.text(width / 2, 18, title, size=14, anchor="middle")

    def text(self, x, y, s, size=11, anchor="start", rotate=None):
        rot = f' transform="rotate({rotate} {_n(x)} {_n(y)})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{_n(x)}" y="{_n(y)}" font-size="{size}" text-anchor="{anchor}"{rot}>{escape(str(s))}</text>'
        )

    def rect(self, x, y, w, h, fill):
        self.parts.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" fill="{fill}"/>')

    def line(self, x1, y1, x2, y2, stroke="#333", width=1.0):
        self.parts.append(
            f'<line x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" stroke="{stroke}" stroke-width="{width}"/>'
        )

    def polyline(self, pts, stroke, width=1.5):
        coords = " ".join(f"{_n(x)},{_n(y)}" for x, y in pts)
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def circle(self, x, y, r, fill):
        self.parts.append(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="{r}" fill="{fill}"/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class Axes:
    """Maps data coordinates into a pixel box and draws ticks."""

    def __init__(self, svg: Svg, box, xlim, ylim):
        self.svg, self.box = svg, box
        self.xlim, self.ylim = xlim, ylim

    def x(self, v):
        x0, _, w, _ = self.box
        lo, hi = self.xlim
        return x0 + (v - lo) / ((hi - lo) or 1.0) * w

    def y(self, v):
        _, y0, _, h = self.box
        lo, hi = self.ylim
        return y0 + h - (v - lo) / ((hi - lo) or 1.0) * h

    def frame(self, ylabel="", yticks=5, xlabel=""):
        x0, y0, w, h = self.box
        s = self.svg
        s.line(x0, y0 + h, x0 + w, y0 + h)
        s.line(x0, y0, x0, y0 + h)
        lo, hi = self.ylim
        for i in range(yticks + 1):
            v = lo + (hi - lo) * i / yticks
            s.line(x0 - 3, self.y(v), x0, self.y(v))
            s.text(x0 - 5, self.y(v) + 4, f"{v:.2g}", size=9, anchor="end")
        if ylabel:
            s.text(x0 - 34, y0 + h / 2, ylabel, rotate=-90, anchor="middle")
        if xlabel:
            s.text(x0 + w / 2, y0 + h + 32, xlabel, anchor="middle")


def legend(svg: Svg, x, y, names):
    for i, name in enumerate(names):
        svg.rect(x, y + 14 * i - 8, 10, 10, PALETTE[i % len(PALETTE)])
        svg.text(x + 14, y + 14 * i + 1, name, size=10)


def grouped_bars(title, groups, series, values, ylabel, ylim=(0.0, 1.0)) -> str:
    """``values[(group, series)]`` -> bar height; missing pairs are skipped."""
    width = max(420, 80 + len(groups) * (26 + 14 * len(series)) + 150)
    svg = Svg(width, 320, title)
    ax = Axes(svg, (60, 40, width - 220, 220), (0, len(groups)), ylim)
    ax.frame(ylabel)
    slot = (width - 220) / max(len(groups), 1)
    bar = slot * 0.8 / max(len(series), 1)
    for gi, g in enumerate(groups):
        for si, s in enumerate(series):
            v = values.get((g, s))
            if v is None:
                continue
            x = ax.x(gi) + slot * 0.1 + si * bar
            top = ax.y(min(max(v, ylim[0]), ylim[1]))
            svg.rect(x, top, bar, ax.y(ylim[0]) - top, PALETTE[si % len(PALETTE)])
        svg.text(ax.x(gi) + slot / 2, 275, g, size=10, anchor="middle")
    legend(svg, width - 150, 50, series)
    return svg.render()


def stacked_bars(title, groups, series, values, ylabel) -> str:
    width = max(420, 80 + len(groups) * 60 + 170)
    svg = Svg(width, 320, title)
    ax = Axes(svg, (60, 40, width - 240, 220), (0, len(groups)), (0.0, 1.0))
    ax.frame(ylabel)
    slot = (width - 240) / max(len(groups), 1)
    for gi, g in enumerate(groups):
        acc = 0.0
        for si, s in enumerate(series):
            v = values.get((g, s), 0.0)
            if v <= 0:
                continue
            top, bottom = ax.y(acc + v), ax.y(acc)
            svg.rect(ax.x(gi) + slot * 0.2, top, slot * 0.6, bottom - top, PALETTE[si % len(PALETTE)])
            acc += v
        svg.text(ax.x(gi) + slot / 2, 275, g, size=10, anchor="middle")
    legend(svg, width - 170, 50, series)
    return svg.render()


def line_panels(title, panels, xlabel, ylabel) -> str:
    """``panels``: ordered {panel title: {series: [(x, y), ...]}}; one row per panel."""
    ph = 200
    names = []
    for lines in panels.values():
        names.extend(n for n in lines if n not in names)
    svg = Svg(620, 40 + ph * len(panels) + 20, title)
    for pi, (ptitle, lines) in enumerate(panels.items()):
        pts = [p for ln in lines.values() for p in ln]
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        top = 40 + pi * ph
        ax = Axes(svg, (60, top + 20, 400, ph - 70), (min(xs), max(xs)), (min(0.0, min(ys)), max(ys) or 1.0))
        ax.frame(ylabel, yticks=4, xlabel=xlabel)
        svg.text(260, top + 12, ptitle, size=12, anchor="middle")
        for lo, hi in ((min(xs), max(xs)),):
            svg.text(ax.x(lo), top + ph - 36, f"{lo:.3g}", size=9, anchor="middle")
            svg.text(ax.x(hi), top + ph - 36, f"{hi:.3g}", size=9, anchor="middle")
        for name, ln in lines.items():
            color = PALETTE[names.index(name) % len(PALETTE)]
            svg.polyline([(ax.x(a), ax.y(b)) for a, b in ln], color)
            if len(ln) <= 12:
                for a, b in ln:
                    svg.circle(ax.x(a), ax.y(b), 2.5, color)
    legend(svg, 480, 60, names)
    return svg.render()


def _read(path: Path) -> list:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise ReportError(f"{path}: cannot read ({exc.strerror})") from exc


def _float(row, key, path):
    try:
        return float(row[key])
    except (KeyError, ValueError) as exc:
        raise ReportError(f"{path}: bad value for {key!r} in row {row}") from exc


def _ordered_labels(present) -> list:
    return [lab for lab in LABEL_ORDER if lab in present] + sorted(set(present) - set(LABEL_ORDER))


def render_detection(path: Path) -> str:
    rows = _read(path)
    groups = [r["detector"] for r in rows]
    metrics = ["auc_all", "pr90_all", "auc_fd", "pr90_fd"]
    values = {(r["detector"], m): _float(r, m, path) for r in rows for m in metrics}
    return grouped_bars("Detection quality (ROC AUC, P@R90)", groups, metrics, values, "score")


def render_by_label(path: Path, title: str, stacked: bool) -> str:
    rows = _read(path)
    groups = list(OrderedDict.fromkeys(r["detector"] for r in rows))
    labels = _ordered_labels({r["label"] for r in rows})
    values = {(r["detector"], r["label"]): _float(r, "value", path) for r in rows}
    if stacked:
        return stacked_bars(title, groups, labels, values, "share of flagged set")
    return grouped_bars(title, groups, labels, values, "recall")


def render_histograms(path: Path) -> str:
    rows = _read(path)
    panels: dict = OrderedDict()
    for r in rows:
        mid = 0.5 * (_float(r, "bin_lo", path) + _float(r, "bin_hi", path))
        panels.setdefault(r["detector"], OrderedDict()).setdefault(r["label"], []).append(
            (mid, _float(r, "density", path))
        )
    for det, lines in panels.items():
        panels[det] = OrderedDict((lab, lines[lab]) for lab in _ordered_labels(lines))
    return line_panels("Risk score distribution by translation type", panels, "risk", "density")


def render_sweep(path: Path) -> str:
    rows = _read(path)
    lines: dict = OrderedDict()
    for r in rows:
        lines.setdefault(r.get("reranker", "risk"), []).append((_float(r, "n", path), _float(r, "mean_risk", path)))
    return line_panels("Mean reranker risk vs number of hypotheses", {"": lines}, "hypotheses", "mean risk")


FIGURES = [
    ("detection.csv", "table1_detection.svg", render_detection),
    ("histograms.csv", "fig2_histograms.svg", render_histograms),
    ("type_distribution.csv", "fig3_type_distribution.svg",
     lambda p: render_by_label(p, "Pathology types in the worst-ranked set", True)),
    ("recall_by_type.csv", "fig4_recall_by_type.svg",
     lambda p: render_by_label(p, "Recall by translation type", False)),
    ("n_sweep.csv", "fig5_n_sweep.svg", render_sweep),
]


def render_report(in_dir, out_dir=None) -> list:
    """Render every figure whose source CSV exists in ``in_dir``; returns written names."""
    in_dir = Path(in_dir)
    out_dir = Path(out_dir or in_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for src, dst, fn in FIGURES:
        if not (in_dir / src).exists():
            continue
        (out_dir / dst).write_text(fn(in_dir / src))
        written.append(dst)
    if not written:
        raise ReportError(f"{in_dir}: no report tables found")
    return written
