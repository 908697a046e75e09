"""Deterministic SVG plots over results CSV rows.

Rendering is byte-stable: the same rows produce the same file, with no
timestamps, random ids or environment-dependent output.  Coordinates are
written with two decimal places.  Four plot kinds:

* ``loss_vs_iteration``       - one polyline per run, log loss axis,
  a triangle marking where each run terminated,
* ``final_loss_vs_batch_size`` - per-optimizer curves over the batch-size
  ladder, medians across seeds,
* ``qq``                      - empirical vs theoretical quantiles with
  the identity guide,
* ``histogram``               - 30 fixed-width bins.

All kinds raise EmptySelection when the row filter leaves nothing to
draw.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySelection

PLOT_KINDS = ("loss_vs_iteration", "final_loss_vs_batch_size", "qq",
              "histogram")

WIDTH, HEIGHT = 640, 440
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 64, 18, 30, 52

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22")

_GUIDE_COLOR = "#888888"


@dataclass(frozen=True)
class PlotSpec:
    """What to draw.

    ``filter`` maps column names to a required value (or list of allowed
    values) and is applied before grouping.  Scales default per kind;
    loss axes default to log.  ``column`` names the value column for
    histograms.
    """

    kind: str
    filter: dict = field(default_factory=dict)
    x_scale: str | None = None
    y_scale: str | None = None
    title: str | None = None
    column: str = "value"

    def __post_init__(self):
        if self.kind not in PLOT_KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}")
        for s in (self.x_scale, self.y_scale):
            if s not in (None, "linear", "log"):
                raise ValueError(f"unknown scale {s!r}")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _matches(row: dict, flt: dict) -> bool:
    for col, want in flt.items():
        have = row.get(col)
        if isinstance(want, (list, tuple, set)):
            if have not in want:
                return False
        elif have != want:
            return False
    return True


class _Scale:
    """Maps data values to pixel coordinates, linear or log10."""

    def __init__(self, kind, lo, hi, px_lo, px_hi, pad=0.04):
        self.kind = kind
        f = math.log10 if kind == "log" else float
        a, b = f(lo), f(hi)
        if a == b:
            a, b = a - 1.0, b + 1.0
        span = b - a
        self.a = a - pad * span
        self.b = b + pad * span
        self.px_lo = px_lo
        self.px_hi = px_hi

    def to_px(self, v):
        f = math.log10 if self.kind == "log" else float
        t = (f(v) - self.a) / (self.b - self.a)
        return self.px_lo + t * (self.px_hi - self.px_lo)

    def ticks(self):
        if self.kind == "log":
            lo_d, hi_d = math.ceil(self.a), math.floor(self.b)
            if hi_d - lo_d >= 1:
                return [(10.0 ** d, f"{10.0 ** d:g}")
                        for d in range(lo_d, hi_d + 1)]
            pos = [self.a + t * (self.b - self.a) for t in
                   (0.05, 0.35, 0.65, 0.95)]
            return [(10.0 ** p, f"{10.0 ** p:.3g}") for p in pos]
        span = self.b - self.a
        raw = span / 4
        mag = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
        norm = raw / mag
        step = mag * (1 if norm < 1.5 else 2 if norm < 3.5 else
                      5 if norm < 7.5 else 10)
        t = math.ceil(self.a / step) * step
        out = []
        while t <= self.b + 1e-9 * max(abs(span), 1.0):
            v = round(t, 12) + 0.0  # avoid -0
            out.append((v, f"{v:g}"))
            t += step
        return out


def _axes_svg(xs: _Scale, ys: _Scale, x_label: str, y_label: str,
              x_ticks=None) -> list:
    left, right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    top, bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM
    parts = [f'<rect x="{left}" y="{top}" width="{right - left}" '
             f'height="{bottom - top}" fill="none" stroke="#333333"/>']
    for v, label in (x_ticks if x_ticks is not None else xs.ticks()):
        px = xs.to_px(v)
        if not (left - 0.5 <= px <= right + 0.5):
            continue
        parts.append(f'<line x1="{_fmt(px)}" y1="{bottom}" x2="{_fmt(px)}" '
                     f'y2="{bottom + 4}" stroke="#333333"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{bottom + 16}" '
                     f'text-anchor="middle">{label}</text>')
    for v, label in ys.ticks():
        py = ys.to_px(v)
        if not (top - 0.5 <= py <= bottom + 0.5):
            continue
        parts.append(f'<line x1="{left - 4}" y1="{_fmt(py)}" x2="{left}" '
                     f'y2="{_fmt(py)}" stroke="#333333"/>')
        parts.append(f'<text x="{left - 7}" y="{_fmt(py + 3.5)}" '
                     f'text-anchor="end">{label}</text>')
    parts.append(f'<text x="{(left + right) // 2}" y="{HEIGHT - 14}" '
                 f'text-anchor="middle">{x_label}</text>')
    parts.append(f'<text transform="rotate(-90 14 {(top + bottom) // 2})" '
                 f'x="14" y="{(top + bottom) // 2}" '
                 f'text-anchor="middle">{y_label}</text>')
    return parts


def _legend_svg(entries: list) -> list:
    shown = entries[:12]
    x = WIDTH - MARGIN_RIGHT - 160
    parts = []
    for i, (label, color) in enumerate(shown):
        y = MARGIN_TOP + 10 + 14 * i
        parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 23}" y="{y + 3.5}">{label}</text>')
    if len(entries) > 12:
        y = MARGIN_TOP + 10 + 14 * 12
        parts.append(f'<text x="{x + 23}" y="{y + 3.5}">'
                     f'(+{len(entries) - 12} more)</text>')
    return parts


def _document(title: str, body: list) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" '
            f'font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" '
            f'fill="#ffffff"/>',
            f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" '
            f'font-size="13">{title}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _polyline(points: list, color: str) -> str:
    coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    return (f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>')


def _terminal_marker(x: float, y: float, color: str) -> str:
    pts = (f"{_fmt(x)},{_fmt(y - 5)} {_fmt(x - 4)},{_fmt(y + 4)} "
           f"{_fmt(x + 4)},{_fmt(y + 4)}")
    return f'<polygon points="{pts}" fill="{color}"/>'


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v)


def _plot_area():
    return (MARGIN_LEFT, WIDTH - MARGIN_RIGHT,
            HEIGHT - MARGIN_BOTTOM, MARGIN_TOP)


# ---------------------------------------------------------------------------
# kinds
# ---------------------------------------------------------------------------


def _render_loss_vs_iteration(spec: PlotSpec, rows: list) -> str:
    y_log = (spec.y_scale or "log") == "log"
    groups = {}
    for row in rows:
        if not _finite(row.get("train_loss")):
            continue
        if y_log and row["train_loss"] <= 0:
            continue
        groups.setdefault(row["run_id"], []).append(row)
    if not groups:
        raise EmptySelection("no finite loss points to draw")

    def meta(run_rows):
        r = run_rows[0]
        return (r["optimizer"], r["batch_label"], r["seed"], r["step_size"])

    ordered = sorted(groups.items(), key=lambda kv: (meta(kv[1]), kv[0]))
    series, labels_seen = [], set()
    for run_id, run_rows in ordered:
        run_rows.sort(key=lambda r: r["iteration"])
        opt, blabel, seed, step = meta(run_rows)
        label = f"{opt} {blabel} s{seed}"
        if label in labels_seen:
            label = f"{label} lr={step:g}"
        labels_seen.add(label)
        series.append((label, [(r["iteration"], r["train_loss"])
                               for r in run_rows]))

    all_x = [x for _, pts in series for x, _ in pts]
    all_y = [y for _, pts in series for _, y in pts]
    left, right, bottom, top = _plot_area()
    xs = _Scale(spec.x_scale or "linear", min(all_x), max(all_x),
                left, right)
    ys = _Scale("log" if y_log else "linear", min(all_y), max(all_y),
                bottom, top)

    body = _axes_svg(xs, ys, "iteration", "train loss")
    legend = []
    for i, (label, pts) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        px = [(xs.to_px(x), ys.to_px(y)) for x, y in pts]
        if len(px) > 1:
            body.append(_polyline(px, color))
        else:
            body.append(f'<circle cx="{_fmt(px[0][0])}" '
                        f'cy="{_fmt(px[0][1])}" r="2.5" fill="{color}"/>')
        body.append(_terminal_marker(px[-1][0], px[-1][1], color))
        legend.append((label, color))
    body.extend(_legend_svg(legend))
    return _document(spec.title or "training loss", body)


def _final_loss(row: dict):
    """Loss value for an epoch-final row, recovered from its metric."""
    name, value = row.get("eval_metric_name"), row.get("eval_metric_value")
    if name == "perplexity" and _finite(value) and value > 0:
        return math.log(value)
    if name == "loss":
        return value
    return row.get("train_loss")


def _render_final_loss(spec: PlotSpec, rows: list) -> str:
    finals = {}
    for row in rows:
        if row.get("eval_metric_name") is None:
            continue
        cur = finals.get(row["run_id"])
        if cur is None or row["iteration"] > cur["iteration"]:
            finals[row["run_id"]] = row
    y_log = (spec.y_scale or "log") == "log"
    points = {}
    for row in finals.values():
        y = _final_loss(row)
        if not _finite(y) or (y_log and y <= 0):
            continue
        points.setdefault(row["optimizer"], {}).setdefault(
            row["batch_size"], []).append(y)
    if not points:
        raise EmptySelection("no epoch-final rows to draw")

    series = []
    for opt in sorted(points):
        pts = [(bs, statistics.median(vals))
               for bs, vals in sorted(points[opt].items())]
        series.append((opt, pts))

    sizes = sorted({bs for _, pts in series for bs, _ in pts})
    all_y = [y for _, pts in series for _, y in pts]
    left, right, bottom, top = _plot_area()
    xs = _Scale(spec.x_scale or "log", sizes[0], sizes[-1], left, right)
    ys = _Scale("log" if y_log else "linear", min(all_y), max(all_y),
                bottom, top)

    x_ticks = [(bs, str(bs)) for bs in sizes]
    body = _axes_svg(xs, ys, "batch size", "final loss", x_ticks=x_ticks)
    legend = []
    for i, (opt, pts) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        px = [(xs.to_px(x), ys.to_px(y)) for x, y in pts]
        if len(px) > 1:
            body.append(_polyline(px, color))
        for cx, cy in px:
            body.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3" '
                        f'fill="{color}"/>')
        legend.append((opt, color))
    body.extend(_legend_svg(legend))
    return _document(spec.title or "final loss vs batch size", body)


def _render_qq(spec: PlotSpec, rows: list) -> str:
    pairs = [(r["theoretical"], r["empirical"]) for r in rows
             if _finite(r.get("theoretical")) and _finite(r.get("empirical"))]
    if not pairs:
        raise EmptySelection("no quantile pairs to draw")
    lo = min(min(t for t, _ in pairs), min(e for _, e in pairs))
    hi = max(max(t for t, _ in pairs), max(e for _, e in pairs))
    left, right, bottom, top = _plot_area()
    xs = _Scale(spec.x_scale or "linear", lo, hi, left, right)
    ys = _Scale(spec.y_scale or "linear", lo, hi, bottom, top)

    body = _axes_svg(xs, ys, "theoretical quantile", "empirical quantile")
    body.append(f'<line x1="{_fmt(xs.to_px(lo))}" y1="{_fmt(ys.to_px(lo))}" '
                f'x2="{_fmt(xs.to_px(hi))}" y2="{_fmt(ys.to_px(hi))}" '
                f'stroke="{_GUIDE_COLOR}" stroke-dasharray="4 3"/>')
    for t, e in pairs:
        body.append(f'<circle cx="{_fmt(xs.to_px(t))}" '
                    f'cy="{_fmt(ys.to_px(e))}" r="2" '
                    f'fill="{_PALETTE[0]}" fill-opacity="0.6"/>')
    return _document(spec.title or "quantile comparison", body)


def _render_histogram(spec: PlotSpec, rows: list) -> str:
    values = [r[spec.column] for r in rows if _finite(r.get(spec.column))]
    if not values:
        raise EmptySelection(f"no finite {spec.column!r} values to draw")
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(arr, bins=30, range=(lo, hi))

    left, right, bottom, top = _plot_area()
    xs = _Scale(spec.x_scale or "linear", lo, hi, left, right, pad=0.0)
    ys = _Scale(spec.y_scale or "linear", 0, max(int(counts.max()), 1),
                bottom, top, pad=0.0)

    body = _axes_svg(xs, ys, spec.column, "count")
    base = ys.to_px(0)
    for count, e0, e1 in zip(counts, edges[:-1], edges[1:]):
        if count == 0:
            continue
        x0, x1 = xs.to_px(float(e0)), xs.to_px(float(e1))
        y = ys.to_px(int(count))
        body.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y)}" '
                    f'width="{_fmt(x1 - x0)}" height="{_fmt(base - y)}" '
                    f'fill="{_PALETTE[0]}" stroke="#ffffff" '
                    f'stroke-width="0.5"/>')
    return _document(spec.title or "histogram", body)


_RENDERERS = {
    "loss_vs_iteration": _render_loss_vs_iteration,
    "final_loss_vs_batch_size": _render_final_loss,
    "qq": _render_qq,
    "histogram": _render_histogram,
}


def render_plot(spec: PlotSpec, rows: list) -> str:
    """Render rows to SVG text.  Raises EmptySelection when the filter
    (or finiteness pruning) leaves nothing to draw."""
    selected = [r for r in rows if _matches(r, spec.filter)]
    if not selected:
        raise EmptySelection("filter matched no rows")
    return _RENDERERS[spec.kind](spec, selected)


def emit_plot(spec: PlotSpec, rows: list, out_path: str) -> str:
    """Render and write an SVG file (UTF-8, LF).  Returns the SVG text."""
    svg = render_plot(spec, rows)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return svg
