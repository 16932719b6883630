"""Self-contained SVG forecast plots (no plotting dependency).

Draws the context/truth line, the median forecast, and a shaded band
between the outermost symmetric quantile pair. Output is built with
ElementTree, so it is well-formed XML by construction and diffs cleanly.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .errors import DataError

WIDTH, HEIGHT = 880, 440
MARGIN = 52


def _symmetric_band(levels: list[float]) -> tuple[int, int] | None:
    """Outermost (lo, hi) column pair with lo + hi == 1, if any."""
    best = None
    for i, lo in enumerate(levels):
        if lo >= 0.5:
            break
        for j, hi in enumerate(levels):
            if abs((1.0 - lo) - hi) < 1e-9:
                if best is None or lo < levels[best[0]]:
                    best = (i, j)
    return best


def _median_column(levels: list[float]) -> int | None:
    for i, lv in enumerate(levels):
        if abs(lv - 0.5) < 1e-9:
            return i
    return None


def plot_forecast_svg(
    forecast: dict,
    out_path: str | Path,
    truth: np.ndarray | None = None,
    title: str | None = None,
) -> None:
    """Render one forecast record ({"id", "levels", "values"}) to SVG."""
    try:
        levels = [float(x) for x in forecast["levels"]]
        grid = np.asarray(forecast["values"], dtype=np.float64)
        series_id = str(forecast.get("id", ""))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed forecast record: {e}") from e
    if grid.ndim != 2 or grid.shape[1] != len(levels):
        raise DataError(f"forecast values must be [horizon x {len(levels)}], got {grid.shape}")

    horizon = grid.shape[0]
    ctx = np.asarray(truth, dtype=np.float64) if truth is not None else np.empty(0)
    n_ctx = ctx.size
    n_total = n_ctx + horizon

    ys = [grid.min(), grid.max()]
    if n_ctx:
        finite = ctx[np.isfinite(ctx)]
        if finite.size:
            ys += [finite.min(), finite.max()]
    y_lo, y_hi = float(min(ys)), float(max(ys))
    if not math.isfinite(y_lo) or not math.isfinite(y_hi):
        raise DataError("forecast contains non-finite values")
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(i: float) -> float:
        return MARGIN + (WIDTH - 2 * MARGIN) * (i / max(1, n_total - 1))

    def sy(v: float) -> float:
        return HEIGHT - MARGIN - (HEIGHT - 2 * MARGIN) * ((v - y_lo) / (y_hi - y_lo))

    def pts(xs, vs) -> str:
        return " ".join(f"{sx(x):.2f},{sy(v):.2f}" for x, v in zip(xs, vs) if math.isfinite(v))

    svg = ET.Element(
        "svg", xmlns="http://www.w3.org/2000/svg",
        width=str(WIDTH), height=str(HEIGHT), viewBox=f"0 0 {WIDTH} {HEIGHT}",
    )
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    axis_style = {"stroke": "#333333", "stroke-width": "1"}
    ET.SubElement(svg, "line", x1=str(MARGIN), y1=str(HEIGHT - MARGIN),
                  x2=str(WIDTH - MARGIN), y2=str(HEIGHT - MARGIN), **axis_style)
    ET.SubElement(svg, "line", x1=str(MARGIN), y1=str(MARGIN),
                  x2=str(MARGIN), y2=str(HEIGHT - MARGIN), **axis_style)
    for v, anchor_y in ((y_hi, MARGIN), (y_lo, HEIGHT - MARGIN)):
        label = ET.SubElement(svg, "text", x=str(MARGIN - 6), y=str(anchor_y + 4),
                              fill="#333333", **{"text-anchor": "end", "font-size": "11"})
        label.text = f"{v:.4g}"

    band = _symmetric_band(levels)
    fx = np.arange(n_ctx, n_total)
    if band is not None:
        lo_i, hi_i = band
        upper = pts(fx, grid[:, hi_i])
        lower = " ".join(
            f"{sx(x):.2f},{sy(v):.2f}" for x, v in zip(fx[::-1], grid[::-1, lo_i])
        )
        ET.SubElement(
            svg, "polygon", points=f"{upper} {lower}",
            fill="#7fb3ff", **{"fill-opacity": "0.35", "stroke": "none"},
        )

    if n_ctx:
        ET.SubElement(svg, "polyline", points=pts(np.arange(n_ctx), ctx),
                      fill="none", stroke="#222222", **{"stroke-width": "1.2"})
    med = _median_column(levels)
    med_col = grid[:, med] if med is not None else grid[:, grid.shape[1] // 2]
    ET.SubElement(svg, "polyline", points=pts(fx, med_col),
                  fill="none", stroke="#1f5fd0", **{"stroke-width": "1.6"})

    caption = ET.SubElement(svg, "text", x=str(MARGIN), y=str(MARGIN - 16),
                            fill="#111111", **{"font-size": "14"})
    caption.text = title if title is not None else f"forecast {series_id} (H={horizon})"

    Path(out_path).write_bytes(ET.tostring(svg, xml_declaration=True, encoding="utf-8"))
