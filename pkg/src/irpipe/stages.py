"""Optional correction stages run between NUC and tonemapping.

Every stage takes and returns a ``RawFrame`` of the same shape, bit depth and
FPA temperature. All boundaries use mirror padding (``d c b | a b c d``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from irpipe.errors import DimensionMismatch, InvalidParams, StateParamMismatch
from irpipe.frames import RawFrame
from irpipe.nuc import BadPixelMap


def _round_clip(values: np.ndarray, frame: RawFrame) -> np.ndarray:
    # inputs here are non-negative or get clipped to 0 anyway
    out = np.floor(values + 0.5)
    return np.clip(out, 0, frame.max_value).astype(np.uint16)


def _default_bpr_kernel() -> np.ndarray:
    k = np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]).astype(np.float64)
    k[2, 2] = 0.0
    return k


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BprParams:
    kernel: np.ndarray = field(default_factory=_default_bpr_kernel)

    def __post_init__(self):
        k = np.array(self.kernel, dtype=np.float64)
        if k.shape != (5, 5):
            raise InvalidParams(f"BPR kernel must be 5x5, got {k.shape}")
        if np.any(k < 0) or k[2, 2] != 0:
            raise InvalidParams("BPR kernel must be non-negative with a zero centre")
        if not np.any(k > 0):
            raise InvalidParams("BPR kernel needs at least one positive weight")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    def __eq__(self, other):
        return isinstance(other, BprParams) and np.array_equal(self.kernel, other.kernel)


@dataclass(frozen=True)
class DestripeParams:
    smooth_window: int = 9

    def __post_init__(self):
        if self.smooth_window < 3 or self.smooth_window % 2 == 0:
            raise InvalidParams("smooth_window must be odd and >= 3")


@dataclass(frozen=True)
class SpatialDenoiseParams:
    method: str = "bilateral"
    sigma_spatial: float = 3.0
    sigma_range: float = 60.0
    patch_radius: int = 3
    search_radius: int = 10
    h: float = 40.0

    def __post_init__(self):
        if self.method not in ("bilateral", "nlm"):
            raise InvalidParams(f"unknown spatial denoise method {self.method!r}")
        if self.patch_radius < 1 or self.search_radius < 1:
            raise InvalidParams("radii must be >= 1")
        if min(self.sigma_spatial, self.sigma_range, self.h) <= 0:
            raise InvalidParams("sigmas and h must be positive")


@dataclass(frozen=True)
class TemporalDenoiseParams:
    block: int = 16
    search_radius: int = 8
    blend_alpha: float = 0.5
    sad_reject: float = 32.0

    def __post_init__(self):
        if self.block < 1 or self.search_radius < 0:
            raise InvalidParams("block must be >= 1 and search_radius >= 0")
        if not 0.0 <= self.blend_alpha < 1.0:
            raise InvalidParams("blend_alpha must be in [0, 1)")


@dataclass(frozen=True)
class FlareParams:
    background_sigma: float | None = None  # None -> width / 8
    max_removal_fraction: float = 0.9

    def __post_init__(self):
        if self.background_sigma is not None and self.background_sigma < 4:
            raise InvalidParams("background_sigma must be >= 4")
        if not 0.0 <= self.max_removal_fraction <= 1.0:
            raise InvalidParams("max_removal_fraction must be in [0, 1]")


# --------------------------------------------------------------------------
# bad-pixel replacement
# --------------------------------------------------------------------------

def replace_bad_pixels(frame: RawFrame, bad: BadPixelMap, params: BprParams | None = None) -> RawFrame:
    """Replace flagged pixels by the kernel-weighted mean of their good,
    in-bounds 5x5 neighbours; isolated pixels get the median of good pixels."""
    params = params or BprParams()
    if bad.shape != frame.shape:
        raise DimensionMismatch("bad-pixel map shape differs from the frame")
    flags = bad.flags
    valid = (~flags).astype(np.float64)
    values = frame.samples.astype(np.float64) * valid
    # zero padding == "outside the frame contributes nothing"
    num = ndimage.correlate(values, params.kernel, mode="constant", cval=0.0)
    den = ndimage.correlate(valid, params.kernel, mode="constant", cval=0.0)
    out = frame.samples.copy()
    fill = flags & (den > 0)
    out[fill] = np.floor(num[fill] / den[fill] + 0.5).astype(np.uint16)
    orphans = flags & (den == 0)
    if orphans.any():
        pool = frame.samples[~flags] if (~flags).any() else frame.samples.ravel()
        out[orphans] = np.uint16(np.floor(np.median(pool) + 0.5))
    return frame.with_samples(out)


# --------------------------------------------------------------------------
# destriping
# --------------------------------------------------------------------------

def column_smoother(column_means: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average over ``window`` columns with mirror padding."""
    return ndimage.uniform_filter1d(column_means, size=window, mode="mirror")


def destripe(frame: RawFrame, params: DestripeParams | None = None) -> RawFrame:
    """Subtract per-column offsets estimated as column mean minus its smoothed
    version."""
    params = params or DestripeParams()
    if frame.width < params.smooth_window:
        raise InvalidParams(f"frame width {frame.width} < smooth_window {params.smooth_window}")
    values = frame.samples.astype(np.float64)
    means = values.mean(axis=0)
    stripes = means - column_smoother(means, params.smooth_window)
    return frame.with_samples(_round_clip(values - stripes[None, :], frame))


# --------------------------------------------------------------------------
# spatial denoising
# --------------------------------------------------------------------------

def _bilateral(values: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma_s))
    h, w = values.shape
    padded = np.pad(values, r, mode="reflect")
    num = np.zeros_like(values)
    den = np.zeros_like(values)
    inv_2r2 = 1.0 / (2.0 * sigma_r * sigma_r)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = math.exp(-(dy * dy + dx * dx) / (2.0 * sigma_s * sigma_s))
            shifted = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            diff = shifted - values
            wgt = ws * np.exp(-(diff * diff) * inv_2r2)
            num += wgt * shifted
            den += wgt
    return num / den


def _nlm(values: np.ndarray, patch_radius: int, search_radius: int, h_param: float) -> np.ndarray:
    h, w = values.shape
    sr, pr = search_radius, patch_radius
    pad = sr + pr
    padded = np.pad(values, pad, mode="reflect")
    # Gaussian patch weights, normalised so distances are mean squared differences
    ax = np.arange(-pr, pr + 1)
    g1 = np.exp(-(ax**2) / (2.0 * (pr / 2.0) ** 2))
    g1 /= g1.sum()
    inv_h2 = 1.0 / (h_param * h_param)
    centre = padded[sr : sr + h + 2 * pr, sr : sr + w + 2 * pr]
    num = np.zeros_like(values)
    den = np.zeros_like(values)
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            other = padded[sr + dy : sr + dy + h + 2 * pr, sr + dx : sr + dx + w + 2 * pr]
            d2 = (centre - other) ** 2
            d2 = ndimage.correlate1d(d2, g1, axis=0, mode="constant")
            d2 = ndimage.correlate1d(d2, g1, axis=1, mode="constant")
            d2 = d2[pr : pr + h, pr : pr + w]
            wgt = np.exp(-d2 * inv_h2)
            num += wgt * other[pr : pr + h, pr : pr + w]
            den += wgt
    return num / den


def spatial_denoise(frame: RawFrame, params: SpatialDenoiseParams | None = None) -> RawFrame:
    """Plain bilateral filter or Gaussian-patch non-local means."""
    params = params or SpatialDenoiseParams()
    values = frame.samples.astype(np.float64)
    if params.method == "bilateral":
        out = _bilateral(values, params.sigma_spatial, params.sigma_range)
    else:
        out = _nlm(values, params.patch_radius, params.search_radius, params.h)
    return frame.with_samples(_round_clip(out, frame))


# --------------------------------------------------------------------------
# temporal denoising
# --------------------------------------------------------------------------

@dataclass
class TdnState:
    """Recursion state for one stream: the previous output frame."""

    params: TemporalDenoiseParams = field(default_factory=TemporalDenoiseParams)
    previous: RawFrame | None = None
    last_vectors: np.ndarray | None = None


def _block_edges(n: int, block: int) -> np.ndarray:
    # trailing partial block is kept as its own smaller block
    return np.arange(0, n, block)


def _candidate_order(radius: int) -> list[tuple[int, int]]:
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # stable sort keeps row-major order among equal magnitudes
    return sorted(cands, key=lambda d: d[0] * d[0] + d[1] * d[1])


def match_blocks(current: np.ndarray, previous: np.ndarray, params: TemporalDenoiseParams):
    """Exhaustive SAD block matching of ``current`` against ``previous``.

    Returns ``(vectors, best_sad, compensated)`` where ``vectors[by, bx]`` is
    the content motion ``(dx, dy)`` from the previous frame to the current one
    (the block at ``p`` matches ``previous`` at ``p - (dx, dy)``), ``best_sad``
    the per-pixel mean SAD, and ``compensated`` the motion-compensated previous
    frame. Candidates whose source block leaves the frame are skipped.
    """
    h, w = current.shape
    R = params.search_radius
    rows, cols = _block_edges(h, params.block), _block_edges(w, params.block)
    row_len = np.diff(np.append(rows, h))
    col_len = np.diff(np.append(cols, w))
    area = row_len[:, None] * col_len[None, :]

    padded = np.pad(previous, R, mode="constant", constant_values=np.nan)
    cands = _candidate_order(R)
    sads = np.empty((len(cands), len(rows), len(cols)))
    for k, (dy, dx) in enumerate(cands):
        src = padded[R - dy : R - dy + h, R - dx : R - dx + w]
        diff = np.abs(current - src)
        block_sum = np.add.reduceat(np.add.reduceat(diff, rows, axis=0), cols, axis=1)
        sads[k] = block_sum
    sads = np.where(np.isnan(sads), np.inf, sads)
    best = np.argmin(sads, axis=0)
    best_sad = np.take_along_axis(sads, best[None], axis=0)[0] / area

    cand_arr = np.array(cands)
    motion = cand_arr[best]  # (..., 2) as (dy, dx)
    vectors = motion[..., ::-1].copy()  # -> (dx, dy)

    compensated = np.empty_like(current)
    for i, (r0, rl) in enumerate(zip(rows, row_len)):
        for j, (c0, cl) in enumerate(zip(cols, col_len)):
            dy, dx = motion[i, j]
            if np.isinf(best_sad[i, j]):
                compensated[r0 : r0 + rl, c0 : c0 + cl] = current[r0 : r0 + rl, c0 : c0 + cl]
                continue
            compensated[r0 : r0 + rl, c0 : c0 + cl] = previous[
                r0 - dy : r0 - dy + rl, c0 - dx : c0 - dx + cl
            ]
    return vectors, best_sad, compensated


def temporal_denoise(
    state: TdnState, frame: RawFrame, params: TemporalDenoiseParams | None = None
) -> tuple[RawFrame, TdnState]:
    """Motion-compensated recursive blend with the previous output.

    Blocks whose best match has a mean SAD above ``sad_reject`` keep the
    current samples. The returned state holds the output frame.
    """
    params = params or state.params
    if params != state.params:
        raise StateParamMismatch("TdnState was created with different parameters")
    if state.previous is None:
        return frame, TdnState(params, frame)
    if state.previous.shape != frame.shape:
        raise DimensionMismatch("frame shape changed within a temporal-denoise stream")

    cur = frame.samples.astype(np.float64)
    prev = state.previous.samples.astype(np.float64)
    vectors, best_sad, comp = match_blocks(cur, prev, params)

    rows, cols = _block_edges(frame.height, params.block), _block_edges(frame.width, params.block)
    accept = best_sad <= params.sad_reject
    row_idx = np.searchsorted(rows, np.arange(frame.height), side="right") - 1
    col_idx = np.searchsorted(cols, np.arange(frame.width), side="right") - 1
    accept_px = accept[row_idx[:, None], col_idx[None, :]]

    a = params.blend_alpha
    blended = np.floor((1.0 - a) * cur + a * comp + 0.5)
    out = np.where(accept_px, blended, cur)
    result = frame.with_samples(np.clip(out, 0, frame.max_value).astype(np.uint16))
    return result, TdnState(params, result, vectors)


# --------------------------------------------------------------------------
# flare correction
# --------------------------------------------------------------------------

def flare_correct(frame: RawFrame, params: FlareParams | None = None) -> RawFrame:
    """Remove a fraction of the low-frequency background (Gaussian blur)
    relative to its mean, so the global mean is kept."""
    params = params or FlareParams()
    sigma = params.background_sigma if params.background_sigma is not None else frame.width / 8.0
    sigma = max(float(sigma), 4.0)
    values = frame.samples.astype(np.float64)
    background = ndimage.gaussian_filter(values, sigma=sigma, mode="mirror")
    out = values - params.max_removal_fraction * (background - background.mean())
    return frame.with_samples(_round_clip(out, frame))
