"""CSV and SVG output for sweep reports."""

from __future__ import annotations

import csv
import io
import math
from html import escape
from pathlib import Path

from irpipe.errors import IoFailure
from irpipe.pipeline import FLAG_ORDER, STAGE_ORDER, SweepReport

BASE_HEADER = [
    "config",
    *FLAG_ORDER,
    "tonemap",
    "rnu_mean",
    "rnu_std",
    "psnr_mean",
    "psnr_std",
    "cni_mean",
    "cni_std",
    "time_total_ms",
] + [f"time_{name}_ms" for name in STAGE_ORDER]


def _num(x: float, fmt: str = ".10g") -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return format(float(x), fmt)


def report_header(report: SweepReport) -> list[str]:
    extra = []
    for row in report.rows:
        for key in row.extra:
            if key not in extra:
                extra.append(key)
    return BASE_HEADER + extra


def report_csv(report: SweepReport) -> str:
    if not report.rows:
        raise ValueError("cannot write an empty report")
    header = report_header(report)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in report.rows:
        m = row.metrics
        cells = [row.descriptor]
        cells += ["1" if row.flags.get(n) else "0" for n in FLAG_ORDER]
        cells.append(row.tonemap)
        for key in ("rnu", "psnr", "cni"):
            mean, std = m.get(key, (math.nan, math.nan))
            cells += [_num(mean), _num(std)]
        cells.append(_num(row.timing.total.mean_ms, ".4f"))
        for name in STAGE_ORDER:
            st = row.timing.stages.get(name)
            cells.append(_num(st.mean_ms, ".4f") if st is not None else "")
        cells += [_num(row.extra[k]) if k in row.extra else "" for k in header[len(BASE_HEADER) :]]
        writer.writerow(cells)
    return buf.getvalue()


def _series(report: SweepReport) -> tuple[str, list[float]]:
    if report.axis == "temperature":
        return "worst-case RNU (%)", [r.extra.get("rnu_worst_mean", math.nan) for r in report.rows]
    if report.axis == "tonemap":
        return "display entropy (bits)", [r.extra.get("entropy_bits", math.nan) for r in report.rows]
    return "mean RNU (%)", [r.metrics["rnu"][0] for r in report.rows]


def _labels(report: SweepReport) -> list[str]:
    if report.axis == "temperature":
        return [f"{r.extra['ambient_c']:g}" for r in report.rows]
    return [r.descriptor for r in report.rows]


def report_svg(report: SweepReport) -> str:
    """Two stacked panels sharing the x axis: the sweep's quality metric and
    total time per frame."""
    if not report.rows:
        raise ValueError("cannot write an empty report")
    n = len(report.rows)
    labels = _labels(report)
    q_name, q_vals = _series(report)
    t_vals = [r.timing.total.mean_ms for r in report.rows]

    left, right, top = 70, 20, 30
    panel_h, gap = 180, 40
    width = max(480, left + right + 40 * n)
    bottom_axis = top + 2 * panel_h + gap
    height = bottom_axis + 110
    plot_w = width - left - right

    def xpos(i: int) -> float:
        return left + plot_w * (i + 0.5) / n

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">'
        f"{escape(report.axis)} sweep ({report.repeats} repeat(s))</text>",
    ]

    def panel(y0: float, name: str, values: list[float], colour: str) -> None:
        finite = [v for v in values if v is not None and math.isfinite(v)]
        lo = min(finite) if finite else 0.0
        hi = max(finite) if finite else 1.0
        if hi <= lo:
            hi = lo + 1.0
        y1 = y0 + panel_h

        def ypos(v: float) -> float:
            return y1 - (v - lo) / (hi - lo) * (panel_h - 10)

        parts.append(f'<g class="panel"><rect x="{left}" y="{y0}" width="{plot_w}" height="{panel_h}" '
                     'fill="none" stroke="#888"/>')
        parts.append(f'<text x="{left - 8}" y="{y0 + 10:.1f}" text-anchor="end">{hi:.3g}</text>')
        parts.append(f'<text x="{left - 8}" y="{y1:.1f}" text-anchor="end">{lo:.3g}</text>')
        parts.append(
            f'<text transform="translate(14,{y0 + panel_h / 2:.1f}) rotate(-90)" '
            f'text-anchor="middle">{escape(name)}</text>'
        )
        pts = [(xpos(i), ypos(v)) for i, v in enumerate(values) if v is not None and math.isfinite(v)]
        if pts:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
            parts.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{colour}"/>' for x, y in pts)
        parts.append("</g>")

    panel(top, q_name, q_vals, "#1f77b4")
    panel(top + panel_h + gap, "time per frame (ms)", t_vals, "#d62728")

    for i, label in enumerate(labels):
        x = xpos(i)
        parts.append(
            f'<g class="xtick"><line x1="{x:.1f}" y1="{bottom_axis}" x2="{x:.1f}" y2="{bottom_axis + 5}" '
            f'stroke="#000"/><text transform="translate({x:.1f},{bottom_axis + 9}) rotate(45)">'
            f"{escape(label)}</text></g>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(report: SweepReport, path, format: str = "csv") -> None:
    if format == "csv":
        text = report_csv(report)
    elif format == "svg":
        text = report_svg(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
