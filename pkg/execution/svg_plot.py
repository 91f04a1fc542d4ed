"""
SVG Plot
========
Learning / transfer curves from metrics CSVs, written as plain SVG text.

One panel per (phase, metric): the metric is oracle_norm when the phase has any
evaluated rows, otherwise loss. Each run_id is a thin polyline; the per-step mean
across runs is drawn bold on top. Output depends only on the input rows.
"""

import csv
from collections import defaultdict

from train_loop import METRICS_COLUMNS

PANEL_WIDTH = 640
PANEL_HEIGHT = 320
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 20, 40, 50
X_UNITS = {"transfer": "transfer attempt"}


def read_metrics_csv(path: str) -> list:
    """Rows as dicts. ValueError on a header that is not the metrics schema or on no rows."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:len(METRICS_COLUMNS)] != METRICS_COLUMNS:
            raise ValueError(f"{path}: not a metrics CSV (expected columns {METRICS_COLUMNS})")
        rows = [dict(zip(header, values)) for values in reader if values]
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    return rows


def _num(text: str) -> float:
    return float(text) if text not in ("", None) else None


def build_panels(rows: list) -> list:
    """[(phase, metric, {run_id: [(step, value), ...]})] in sorted phase order."""
    by_phase = defaultdict(list)
    for row in rows:
        by_phase[row["phase"]].append(row)
    panels = []
    for phase in sorted(by_phase):
        phase_rows = by_phase[phase]
        metric = "oracle_norm" if any(r["oracle_norm"] != "" for r in phase_rows) else "loss"
        series = defaultdict(list)
        for r in phase_rows:
            value = _num(r[metric])
            if value is not None:
                series[r["run_id"]].append((int(r["step"]), value))
        series = {run: sorted(points) for run, points in sorted(series.items()) if points}
        if series:
            panels.append((phase, metric, series))
    return panels


def mean_curve(series: dict) -> list:
    by_step = defaultdict(list)
    for points in series.values():
        for step, value in points:
            by_step[step].append(value)
    return [(step, sum(v) / len(v)) for step, v in sorted(by_step.items())]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _panel_svg(index: int, phase: str, metric: str, series: dict) -> list:
    top = index * PANEL_HEIGHT
    x0, x1 = MARGIN_LEFT, PANEL_WIDTH - MARGIN_RIGHT
    y0, y1 = top + PANEL_HEIGHT - MARGIN_BOTTOM, top + MARGIN_TOP
    points = [p for pts in series.values() for p in pts]
    xmin, xmax = min(p[0] for p in points), max(p[0] for p in points)
    ymin, ymax = min(p[1] for p in points), max(p[1] for p in points)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5

    def sx(x):
        return x0 + (x - xmin) * (x1 - x0) / (xmax - xmin)

    def sy(y):
        return y0 - (y - ymin) * (y0 - y1) / (ymax - ymin)

    def polyline(pts, css, width):
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        return (f'<polyline class="{css}" fill="none" stroke="#1f4e79" '
                f'stroke-width="{width}" points="{coords}"/>')

    x_label = X_UNITS.get(phase, "minibatches")
    out = [
        f'<g class="panel" id="panel-{index}">',
        f'<text x="{PANEL_WIDTH // 2}" y="{top + 24}" text-anchor="middle" font-size="15">'
        f'{phase}: {metric}</text>',
        f'<line x1="{x0}" y1="{_fmt(y0)}" x2="{x1}" y2="{_fmt(y0)}" stroke="black"/>',
        f'<line x1="{x0}" y1="{_fmt(y0)}" x2="{x0}" y2="{_fmt(y1)}" stroke="black"/>',
        f'<text x="{(x0 + x1) // 2}" y="{top + PANEL_HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12">{x_label}</text>',
        f'<text x="16" y="{_fmt((y0 + y1) / 2)}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {_fmt((y0 + y1) / 2)})">{metric}</text>',
        f'<text x="{x0 - 6}" y="{_fmt(y0)}" text-anchor="end" font-size="10">{ymin:.3g}</text>',
        f'<text x="{x0 - 6}" y="{_fmt(y1 + 4)}" text-anchor="end" font-size="10">{ymax:.3g}</text>',
        f'<text x="{x0}" y="{_fmt(y0 + 14)}" text-anchor="middle" font-size="10">{xmin}</text>',
        f'<text x="{x1}" y="{_fmt(y0 + 14)}" text-anchor="middle" font-size="10">{xmax}</text>',
    ]
    for run in sorted(series):
        out.append(polyline(series[run], "run", 1))
    out.append(polyline(mean_curve(series), "mean", 3))
    out.append("</g>")
    return out


def render_svg(rows: list) -> str:
    panels = build_panels(rows)
    if not panels:
        raise ValueError("No plottable values in the metrics rows")
    height = PANEL_HEIGHT * len(panels)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_WIDTH}" height="{height}" '
        f'viewBox="0 0 {PANEL_WIDTH} {height}">',
        f'<rect width="{PANEL_WIDTH}" height="{height}" fill="white"/>',
    ]
    for i, (phase, metric, series) in enumerate(panels):
        lines.extend(_panel_svg(i, phase, metric, series))
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def plot_metrics(csv_paths: list, out_path: str) -> dict:
    """Read, render and write. Nothing is written if any input fails to parse."""
    rows = []
    for path in csv_paths:
        rows.extend(read_metrics_csv(path))
    svg = render_svg(rows)
    with open(out_path, "w", newline="\n") as f:
        f.write(svg)
    panels = svg.count('class="panel"')
    print(f"[Plot] Wrote {out_path} ({panels} panels from {len(rows)} rows)")
    return {"path": out_path, "panels": panels, "rows": len(rows)}
