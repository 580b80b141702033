"""Image-quality scores for corrected (pre-tonemap) frames."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from irpipe.errors import DimensionMismatch
from irpipe.frames import RawFrame
from irpipe.stages import DestripeParams, column_smoother

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class QualityMetrics:
    rnu_percent: float
    cni: float
    psnr_db: float | None = None


def rnu_percent(values: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Residual non-uniformity, ``100 * std / mean`` over (masked) pixels."""
    v = values.astype(np.float64)
    if mask is not None:
        v = v[mask]
    else:
        v = v.ravel()
    std = float(v.std())
    mean = float(v.mean())
    if std == 0.0:
        return 0.0
    if mean <= 0.0:
        return math.inf
    return 100.0 * std / mean


def psnr_db(values: np.ndarray, reference: np.ndarray, peak: float) -> float:
    err = values.astype(np.float64) - reference.astype(np.float64)
    rmse = float(np.sqrt(np.mean(err * err)))
    if rmse < peak * 10.0 ** (-PSNR_CAP_DB / 20.0):
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * math.log10(peak / rmse))


def column_noise_index(values: np.ndarray, window: int = DestripeParams().smooth_window) -> float:
    """Std of column means after removing their moving-average trend.

    Only interior columns (>= window // 2 from either edge) count. The
    ``sqrt(w / (w - 1))`` factor undoes the variance the moving average itself
    absorbs, so white column offsets of std ``s`` score ``s``.
    """
    means = values.astype(np.float64).mean(axis=0)
    resid = means - column_smoother(means, window)
    half = window // 2
    interior = resid[half : len(resid) - half] if len(resid) > 2 * half else resid
    if interior.size < 2:
        return 0.0
    return float(interior.std() * math.sqrt(window / (window - 1.0)))


def quality_metrics(
    corrected: RawFrame,
    clean: RawFrame | None = None,
    mask: np.ndarray | None = None,
) -> QualityMetrics:
    """RNU, column-noise index and, with a clean reference, PSNR.

    RNU is only meaningful when ``corrected`` images a flat field. ``mask``
    restricts RNU to selected pixels (e.g. excluding known bad pixels).
    """
    if clean is not None and clean.shape != corrected.shape:
        raise DimensionMismatch("corrected and clean frames differ in shape")
    values = corrected.samples
    psnr = None
    if clean is not None:
        psnr = psnr_db(values, clean.samples, float(corrected.max_value))
    return QualityMetrics(
        rnu_percent=rnu_percent(values, mask),
        cni=column_noise_index(values),
        psnr_db=psnr,
    )
