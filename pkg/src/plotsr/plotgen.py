"""Deterministic PNG line plots of univariate data."""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from matplotlib.backends.backend_agg import FigureCanvasAgg  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
from PIL import Image  # noqa: E402

from .numfit import Dataset  # noqa: E402

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PlotError(ValueError):
    pass


class NonFiniteData(PlotError):
    pass


class DegenerateRange(PlotError):
    pass


class TooFewPoints(PlotError):
    pass


@dataclass(frozen=True)
class PlotSpec:
    width: int = 800
    height: int = 600
    margins: tuple[float, float, float, float] = (0.1, 0.08, 0.96, 0.96)  # left, bottom, right, top
    line_color: str = "black"
    line_width_px: float = 2.0
    background: str = "white"
    grid_color: str = "#d9d9d9"
    n_ticks: int = 6
    pad_fraction: float = 0.05

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError("plot width and height must be >= 64 px")


_DPI = 100


def _sorted_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise PlotError("x and y lengths differ")
    if x.shape[0] < 2:
        raise TooFewPoints("need at least 2 points to draw a line")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteData("plot data contains NaN or inf")
    if np.ptp(x) == 0:
        raise DegenerateRange("all x values are identical")
    order = np.lexsort((y, x))
    return x[order], y[order]


def _padded(lo: float, hi: float, frac: float) -> tuple[float, float]:
    span = hi - lo
    if span == 0:
        span = max(abs(lo), 1.0)
    return lo - frac * span, hi + frac * span


def _encode(fig: Figure) -> bytes:
    canvas = FigureCanvasAgg(fig)
    canvas.draw()
    rgba = np.asarray(canvas.buffer_rgba())
    img = Image.fromarray(rgba[:, :, :3].copy(), mode="RGB")
    buf = io.BytesIO()
    # fixed encoder settings and no ancillary chunks keep the bytes reproducible
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _figure(spec: PlotSpec) -> tuple[Figure, object]:
    fig = Figure(figsize=(spec.width / _DPI, spec.height / _DPI), dpi=_DPI, facecolor=spec.background)
    left, bottom, right, top = spec.margins
    ax = fig.add_axes((left, bottom, right - left, top - bottom))
    ax.set_facecolor(spec.background)
    ax.grid(True, color=spec.grid_color, linewidth=0.8)
    ax.set_axisbelow(True)
    ax.xaxis.set_major_locator(MaxNLocator(spec.n_ticks))
    ax.yaxis.set_major_locator(MaxNLocator(spec.n_ticks))
    return fig, ax


def _line_points(spec: PlotSpec) -> float:
    return spec.line_width_px * 72.0 / _DPI


def render_xy(x, y, spec: PlotSpec = PlotSpec(), overlay=None) -> bytes:
    """Render points joined by straight segments in ascending-x order.

    ``overlay`` is an optional ``(x, y)`` pair drawn dashed in red; it is only
    used for human-facing fit reports, never for model prompts.
    """
    xs, ys = _sorted_xy(x, y)
    fig, ax = _figure(spec)
    ax.plot(xs, ys, color=spec.line_color, linewidth=_line_points(spec), solid_joinstyle="round")
    ylo, yhi = float(ys.min()), float(ys.max())
    if overlay is not None:
        ox, oy = np.asarray(overlay[0], float), np.asarray(overlay[1], float)
        ok = np.isfinite(ox) & np.isfinite(oy)
        if ok.any():
            order = np.argsort(ox[ok], kind="stable")
            ax.plot(ox[ok][order], oy[ok][order], color="tab:red", linestyle="--", linewidth=_line_points(spec) * 0.75)
    ax.set_xlim(*_padded(float(xs[0]), float(xs[-1]), spec.pad_fraction))
    ax.set_ylim(*_padded(ylo, yhi, spec.pad_fraction))
    return _encode(fig)


def render_plot(data: Dataset, spec: PlotSpec = PlotSpec()) -> bytes:
    """PNG bytes of a univariate dataset; identical inputs give identical bytes."""
    if data.d != 1:
        raise PlotError("only univariate datasets can be plotted")
    return render_xy(data.inputs[:, 0], data.targets, spec)


def to_image_payload(png: bytes) -> str:
    """``data:image/png;base64,...`` URL for a chat image content part."""
    if not png:
        raise ValueError("empty image")
    if not png.startswith(PNG_SIGNATURE):
        raise ValueError("not a PNG image")
    return "data:image/png;base64," + base64.b64encode(png).decode("ascii")


def png_size(png: bytes) -> tuple[int, int]:
    """(width, height) read from the IHDR chunk."""
    if not png.startswith(PNG_SIGNATURE) or png[12:16] != b"IHDR":
        raise ValueError("not a PNG image")
    return int.from_bytes(png[16:20], "big"), int.from_bytes(png[20:24], "big")
