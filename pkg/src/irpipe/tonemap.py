"""14-bit to 8-bit tonemapping operators.

Nine algorithms: the linear family (``minmax``, ``std3``, ``clip``,
``adaptive1``), histogram equalisation (``equalized``, plateau-limited
``dynamic``, tiled ``clahe``), a three-knee ``piecewise`` curve and
``adaptive2`` (minmax followed by a median-targeting gamma).

A constant frame, or any linear map with ``hi <= lo``, yields all-128.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from irpipe.errors import InvalidParams
from irpipe.frames import DisplayFrame, RawFrame, frame_stats

ALGORITHMS = (
    "minmax",
    "std3",
    "clip",
    "equalized",
    "clahe",
    "piecewise",
    "adaptive1",
    "adaptive2",
    "dynamic",
)

MID_GRAY = 128


@dataclass(frozen=True)
class TonemapSpec:
    algorithm: str = "std3"
    lo: float | None = None  # minmax/clip bounds; None -> frame min/max (minmax), 0/2^bd-1 (clip)
    hi: float | None = None
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 4.0
    knee_percentiles: tuple[float, ...] = (1.0, 50.0, 99.0)
    knee_outputs: tuple[float, ...] = (0.0, 128.0, 255.0)
    clip_percentiles: tuple[float, float] = (0.5, 99.5)
    target_median: float = 128.0
    plateau: float = 0.05

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidParams(f"unknown tonemap algorithm {self.algorithm!r}")
        if self.lo is not None and self.hi is not None and self.hi <= self.lo:
            raise InvalidParams("tonemap bounds need hi > lo")
        for name in ("knee_percentiles", "clip_percentiles"):
            p = tuple(float(v) for v in getattr(self, name))
            if any(b <= a for a, b in zip(p, p[1:])) or p[0] < 0 or p[-1] > 100:
                raise InvalidParams(f"{name} must be strictly increasing within [0, 100]")
            object.__setattr__(self, name, p)
        outs = tuple(float(v) for v in self.knee_outputs)
        if len(outs) != len(self.knee_percentiles) or any(b < a for a, b in zip(outs, outs[1:])):
            raise InvalidParams("knee_outputs must be non-decreasing, one per knee percentile")
        object.__setattr__(self, "knee_outputs", outs)
        if not 0.0 < self.plateau <= 1.0:
            raise InvalidParams("plateau fraction must be in (0, 1]")
        if self.tiles_x < 1 or self.tiles_y < 1 or self.clip_limit <= 0:
            raise InvalidParams("clahe needs positive tile counts and clip limit")
        if not 0.0 < self.target_median < 255.0:
            raise InvalidParams("target_median must be in (0, 255)")


def _gray(shape) -> np.ndarray:
    return np.full(shape, MID_GRAY, dtype=np.uint8)


def linear_map(samples: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """``clamp(floor(256 * (v - lo) / (hi - lo)), 0, 255)``; all-128 if ``hi <= lo``."""
    if not hi > lo:
        return _gray(samples.shape)
    scaled = np.floor(256.0 * (samples.astype(np.float64) - lo) / (hi - lo))
    return np.clip(scaled, 0, 255).astype(np.uint8)


def _cdf_map(hist: np.ndarray) -> np.ndarray | None:
    """Equalisation LUT over histogram bins, or None for a single occupied bin."""
    total = hist.sum()
    cdf = np.cumsum(hist) / total
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    if cdf_min >= 1.0:
        return None
    lut = np.floor(255.0 * (cdf - cdf_min) / (1.0 - cdf_min) + 0.5)
    return np.clip(lut, 0, 255).astype(np.uint8)


def _equalize(frame: RawFrame, plateau: float = 1.0) -> np.ndarray:
    hist = np.bincount(frame.samples.ravel(), minlength=1 << frame.bit_depth).astype(np.float64)
    if plateau < 1.0:
        hist = np.minimum(hist, plateau * hist.max())
    lut = _cdf_map(hist)
    if lut is None:
        return _gray(frame.shape)
    return lut[frame.samples]


def _clahe(frame: RawFrame, spec: TonemapSpec) -> np.ndarray:
    samples = frame.samples
    lo, hi = int(samples.min()), int(samples.max())
    nbins = hi - lo + 1
    idx = samples.astype(np.int64) - lo
    h, w = samples.shape
    ty, tx = min(spec.tiles_y, h), min(spec.tiles_x, w)
    ys = np.linspace(0, h, ty + 1).astype(int)
    xs = np.linspace(0, w, tx + 1).astype(int)

    luts = np.empty((ty, tx, nbins), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = idx[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].ravel()
            hist = np.bincount(tile, minlength=nbins).astype(np.float64)
            limit = max(spec.clip_limit * tile.size / nbins, 1.0)
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / nbins
            cdf = np.cumsum(hist)
            luts[i, j] = 255.0 * cdf / cdf[-1]

    # bilinear interpolation between tile centres, clamped at the borders
    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    cx = (xs[:-1] + xs[1:] - 1) / 2.0

    def _axis(coords, centres):
        pos = np.interp(coords, centres, np.arange(len(centres)))
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, len(centres) - 1)
        return i0, i1, pos - i0

    y0, y1, fy = _axis(np.arange(h), cy)
    x0, x1, fx = _axis(np.arange(w), cx)
    Y0, Y1, FY = y0[:, None], y1[:, None], fy[:, None]
    X0, X1, FX = x0[None, :], x1[None, :], fx[None, :]
    out = (
        (1 - FY) * (1 - FX) * luts[Y0, X0, idx]
        + (1 - FY) * FX * luts[Y0, X1, idx]
        + FY * (1 - FX) * luts[Y1, X0, idx]
        + FY * FX * luts[Y1, X1, idx]
    )
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _piecewise(frame: RawFrame, spec: TonemapSpec) -> np.ndarray:
    knees_in = np.percentile(frame.samples, spec.knee_percentiles)
    xs, ys = [], []
    for x, y in zip(knees_in, spec.knee_outputs):
        if xs and x <= xs[-1]:
            # collapse coincident knees; keep the larger output to stay monotone
            ys[-1] = max(ys[-1], y)
            continue
        xs.append(float(x))
        ys.append(float(y))
    if len(xs) < 2:
        return _gray(frame.shape)
    out = np.interp(frame.samples.astype(np.float64), xs, ys)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _adaptive2(frame: RawFrame, spec: TonemapSpec) -> np.ndarray:
    base = linear_map(frame.samples, float(frame.samples.min()), float(frame.samples.max()))
    median = float(np.median(base))
    median = min(max(median, 1.0), 254.0)
    gamma = np.log(spec.target_median / 255.0) / np.log(median / 255.0)
    out = 255.0 * (base.astype(np.float64) / 255.0) ** gamma
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def tonemap(frame: RawFrame, spec: TonemapSpec | None = None) -> DisplayFrame:
    """Map a corrected frame to 8 bits with the algorithm in ``spec``."""
    spec = spec or TonemapSpec()
    samples = frame.samples
    if samples.min() == samples.max():
        return DisplayFrame(_gray(frame.shape), frame.fpa_temp_c)

    algo = spec.algorithm
    if algo == "minmax":
        lo = float(samples.min()) if spec.lo is None else spec.lo
        hi = float(samples.max()) if spec.hi is None else spec.hi
        out = linear_map(samples, lo, hi)
    elif algo == "std3":
        st = frame_stats(frame)
        out = linear_map(samples, st.mean - 3.0 * st.std, st.mean + 3.0 * st.std)
    elif algo == "clip":
        lo = 0.0 if spec.lo is None else spec.lo
        hi = float(frame.max_value) if spec.hi is None else spec.hi
        out = linear_map(samples, lo, hi)
    elif algo == "adaptive1":
        lo, hi = np.percentile(samples, spec.clip_percentiles)
        out = linear_map(samples, float(lo), float(hi))
    elif algo == "equalized":
        out = _equalize(frame)
    elif algo == "dynamic":
        out = _equalize(frame, spec.plateau)
    elif algo == "clahe":
        out = _clahe(frame, spec)
    elif algo == "piecewise":
        out = _piecewise(frame, spec)
    else:
        out = _adaptive2(frame, spec)
    return DisplayFrame(out, frame.fpa_temp_c)
