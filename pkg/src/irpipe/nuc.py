"""Non-uniformity correction: two-point (shutter) and three-reference
(shutterless) calibration, bad-pixel detection, and table application.

Correction model, per pixel::

    corrected = gain * raw + offset + drift_slope * (fpa_temp_c - t_amb_ref_c)

Gain and offset come from cold/hot flat fields at one ambient temperature. The
shutterless table adds a linear ambient drift on the offset, fitted from a third
reference taken at a second ambient temperature. Shutter tables keep
``drift_slope == 0`` and can be re-anchored in the field with a closed-shutter
frame (``shutter_update_offset``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from irpipe.errors import (
    DegenerateAmbient,
    DimensionMismatch,
    InvalidSetpoints,
    IoFailure,
    MalformedHeader,
    ModeMismatch,
    TooFewFrames,
    TooManyBadPixels,
    TruncatedPayload,
)
from irpipe.frames import FrameStack, RawFrame

RESPONSIVITY_FLOOR = 8.0  # LSB
GAIN_RANGE = (0.1, 10.0)
MAX_BAD_FRACTION = 0.05
# robust sigma multiplier for gain outliers; see detect_bad_pixels
GAIN_OUTLIER_K = 6.0
_IQR_TO_SIGMA = 1.0 / 1.3489795003921634

SHUTTER = "shutter"
SHUTTERLESS = "shutterless"


@dataclass(frozen=True)
class CalibrationSetpoints:
    """Scene and ambient temperatures (deg C) of the calibration references.

    Shutterless mode is selected by giving both ``t_amb_2_c`` and
    ``t_scene_3_c``.
    """

    t_amb_1_c: float = 25.0
    t_scene_cold_c: float = 10.0
    t_scene_hot_c: float = 40.0
    t_amb_2_c: float | None = None
    t_scene_3_c: float | None = None

    def __post_init__(self):
        temps = [self.t_amb_1_c, self.t_scene_cold_c, self.t_scene_hot_c]
        temps += [t for t in (self.t_amb_2_c, self.t_scene_3_c) if t is not None]
        if any(not (-20.0 <= float(t) <= 60.0) for t in temps):
            raise InvalidSetpoints(f"setpoint temperatures must lie in [-20, 60]: {temps}")
        if self.t_scene_hot_c <= self.t_scene_cold_c:
            raise InvalidSetpoints("t_scene_hot_c must exceed t_scene_cold_c")
        if (self.t_amb_2_c is None) != (self.t_scene_3_c is None):
            raise InvalidSetpoints("t_amb_2_c and t_scene_3_c must be given together")
        if self.t_amb_2_c is not None:
            if self.t_amb_2_c == self.t_amb_1_c:
                raise DegenerateAmbient("t_amb_2_c must differ from t_amb_1_c")
            if self.t_scene_3_c not in (self.t_scene_cold_c, self.t_scene_hot_c):
                raise InvalidSetpoints("t_scene_3_c must equal the cold or hot scene temperature")

    @property
    def mode(self) -> str:
        return SHUTTER if self.t_amb_2_c is None else SHUTTERLESS

    @classmethod
    def shutterless(cls, t_amb_1_c=30.0, t_amb_2_c=35.0, t_scene_3_c=10.0, **kw):
        return cls(t_amb_1_c=t_amb_1_c, t_amb_2_c=t_amb_2_c, t_scene_3_c=t_scene_3_c, **kw)


@dataclass(frozen=True, eq=False)
class BadPixelMap:
    flags: np.ndarray

    def __post_init__(self):
        arr = np.array(self.flags, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ValueError("bad-pixel flags must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "flags", arr)

    @classmethod
    def empty(cls, height: int, width: int) -> "BadPixelMap":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def shape(self):
        return self.flags.shape

    @property
    def width(self) -> int:
        return self.flags.shape[1]

    @property
    def height(self) -> int:
        return self.flags.shape[0]

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @property
    def fraction(self) -> float:
        return self.count / self.flags.size

    def __or__(self, other: "BadPixelMap") -> "BadPixelMap":
        return BadPixelMap(self.flags | other.flags)

    def __eq__(self, other):
        if not isinstance(other, BadPixelMap):
            return NotImplemented
        return np.array_equal(self.flags, other.flags)

    __hash__ = None


def _frozen_f64(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CalibrationTable:
    mode: str
    gain: np.ndarray
    offset: np.ndarray
    drift_slope: np.ndarray
    t_amb_ref_c: float
    target_cold: float
    target_hot: float
    bad_pixels: BadPixelMap = field(default=None)

    def __post_init__(self):
        if self.mode not in (SHUTTER, SHUTTERLESS):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        gain, offset, drift = (_frozen_f64(a) for a in (self.gain, self.offset, self.drift_slope))
        if not (gain.shape == offset.shape == drift.shape) or gain.ndim != 2:
            raise DimensionMismatch("gain, offset and drift_slope planes must share a 2-D shape")
        bad = self.bad_pixels if self.bad_pixels is not None else BadPixelMap.empty(*gain.shape)
        if bad.shape != gain.shape:
            raise DimensionMismatch("bad-pixel map shape differs from the table")
        if self.mode == SHUTTER and np.any(drift != 0):
            raise ModeMismatch("shutter tables carry no drift term")
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "drift_slope", drift)
        object.__setattr__(self, "bad_pixels", bad)
        object.__setattr__(self, "t_amb_ref_c", float(self.t_amb_ref_c))

    @property
    def shape(self):
        return self.gain.shape

    @property
    def width(self) -> int:
        return self.gain.shape[1]

    @property
    def height(self) -> int:
        return self.gain.shape[0]

    @classmethod
    def identity(cls, height: int, width: int, mode: str = SHUTTER, t_amb_ref_c: float = 25.0):
        ones, zeros = np.ones((height, width)), np.zeros((height, width))
        return cls(mode, ones, zeros, zeros, t_amb_ref_c, 0.0, 0.0, BadPixelMap.empty(height, width))

    def __eq__(self, other):
        if not isinstance(other, CalibrationTable):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.t_amb_ref_c == other.t_amb_ref_c
            and self.target_cold == other.target_cold
            and self.target_hot == other.target_hot
            and np.array_equal(self.gain, other.gain)
            and np.array_equal(self.offset, other.offset)
            and np.array_equal(self.drift_slope, other.drift_slope)
            and self.bad_pixels == other.bad_pixels
        )

    __hash__ = None


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_stacks(*stacks: FrameStack) -> None:
    first = stacks[0]
    for s in stacks:
        if s.shape != first.shape:
            raise DimensionMismatch(
                f"stack is {s.width}x{s.height}, expected {first.width}x{first.height}"
            )
        if len(s) < 2:
            raise TooFewFrames(f"calibration references need >= 2 frames, got {len(s)}")


def _raise_if_too_many(flags: np.ndarray) -> None:
    frac = flags.mean()
    if frac >= MAX_BAD_FRACTION:
        raise TooManyBadPixels(
            f"{int(flags.sum())} bad pixels ({100 * frac:.2f}%) >= {100 * MAX_BAD_FRACTION:.0f}% "
            "limit; sensor unusable"
        )


def _two_point(cold_mean, hot_mean, bad):
    """Gain/offset solve with range-based flagging iterated to a fixed point."""
    bad = bad.copy()
    span = hot_mean - cold_mean
    for _ in range(10):
        good = ~bad
        c_bar = float(cold_mean[good].mean())
        h_bar = float(hot_mean[good].mean())
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (h_bar - c_bar) / span
        out_of_range = ~np.isfinite(gain) | (gain < GAIN_RANGE[0]) | (gain > GAIN_RANGE[1])
        new_bad = bad | out_of_range
        if np.array_equal(new_bad, bad):
            break
        bad = new_bad
        _raise_if_too_many(bad)
    gain = np.where(bad, 1.0, gain)
    offset = np.where(bad, 0.0, c_bar - gain * cold_mean)
    return gain, offset, bad, c_bar, h_bar


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def detect_bad_pixels(
    cold: FrameStack,
    hot: FrameStack,
    responsivity_floor: float = RESPONSIVITY_FLOOR,
    outlier_k: float = GAIN_OUTLIER_K,
) -> BadPixelMap:
    """Flag non-responsive, gain-outlier and stuck pixels.

    * non-responsive: ``|H - C| < responsivity_floor``
    * gain outlier: two-point gain further than ``outlier_k`` robust sigmas
      (IQR / 1.349) from the median gain
    * stuck: zero temporal variance in both stacks while the typical pixel
      has non-zero temporal variance
    """
    _check_stacks(cold, hot)
    c_stack, h_stack = cold.as_array(), hot.as_array()
    c_mean, h_mean = c_stack.mean(axis=0), h_stack.mean(axis=0)
    span = h_mean - c_mean

    bad = np.abs(span) < responsivity_floor

    good = ~bad
    if good.any():
        gain = np.full(span.shape, np.nan)
        gain[good] = (h_mean[good].mean() - c_mean[good].mean()) / span[good]
        q1, med, q3 = np.percentile(gain[good], [25, 50, 75])
        sigma = (q3 - q1) * _IQR_TO_SIGMA
        bad |= good & (np.abs(gain - med) > outlier_k * sigma)

    c_std, h_std = c_stack.std(axis=0), h_stack.std(axis=0)
    pooled = np.maximum(c_std, h_std)
    if np.median(pooled) > 0:
        bad |= pooled == 0

    _raise_if_too_many(bad)
    return BadPixelMap(bad)


def calibrate_shutter(
    cold: FrameStack,
    hot: FrameStack,
    setpoints: CalibrationSetpoints | None = None,
    bad_pixels: BadPixelMap | None = None,
) -> CalibrationTable:
    """Two-point gain/offset calibration from cold and hot flat-field stacks.

    Correcting either reference with the result yields its spatial mean over
    good pixels. Pixels flagged by ``detect_bad_pixels`` (or passed in
    ``bad_pixels``), or whose gain falls outside [0.1, 10], are neutralised.
    """
    setpoints = setpoints or CalibrationSetpoints()
    _check_stacks(cold, hot)
    detected = detect_bad_pixels(cold, hot)
    if bad_pixels is not None:
        if bad_pixels.shape != cold.shape:
            raise DimensionMismatch("bad-pixel map shape differs from the stacks")
        detected = detected | bad_pixels
    c_mean, h_mean = cold.temporal_mean(), hot.temporal_mean()
    gain, offset, bad, c_bar, h_bar = _two_point(c_mean, h_mean, detected.flags)
    _raise_if_too_many(bad)
    zeros = np.zeros_like(gain)
    return CalibrationTable(
        SHUTTER, gain, offset, zeros, setpoints.t_amb_1_c, c_bar, h_bar, BadPixelMap(bad)
    )


def calibrate_shutterless(
    cold_1: FrameStack,
    hot_1: FrameStack,
    ref_2: FrameStack,
    setpoints: CalibrationSetpoints,
    bad_pixels: BadPixelMap | None = None,
) -> CalibrationTable:
    """Three-reference calibration: two-point table at ``t_amb_1_c`` plus a
    per-pixel offset drift slope from ``ref_2`` (scene ``t_scene_3_c`` seen at
    ambient ``t_amb_2_c``)."""
    if setpoints.mode != SHUTTERLESS:
        raise ModeMismatch("shutterless calibration needs t_amb_2_c and t_scene_3_c")
    d_amb = setpoints.t_amb_2_c - setpoints.t_amb_1_c
    if abs(d_amb) < 1.0:
        raise DegenerateAmbient(f"|t_amb_2 - t_amb_1| = {abs(d_amb):g} < 1 degC")
    _check_stacks(cold_1, hot_1, ref_2)
    base = calibrate_shutter(cold_1, hot_1, setpoints, bad_pixels)
    target_3 = base.target_cold if setpoints.t_scene_3_c == setpoints.t_scene_cold_c else base.target_hot
    r_mean = ref_2.temporal_mean()
    bad = base.bad_pixels.flags
    offset_2 = target_3 - base.gain * r_mean
    slope = np.where(bad, 0.0, (offset_2 - base.offset) / d_amb)
    return CalibrationTable(
        SHUTTERLESS,
        base.gain,
        base.offset,
        slope,
        setpoints.t_amb_1_c,
        base.target_cold,
        base.target_hot,
        base.bad_pixels,
    )


def apply_nuc(frame: RawFrame, table: CalibrationTable) -> RawFrame:
    """Apply the per-pixel affine correction; bad pixels pass through."""
    if frame.shape != table.shape:
        raise DimensionMismatch(
            f"frame is {frame.width}x{frame.height}, table is {table.width}x{table.height}"
        )
    raw = frame.samples.astype(np.float64)
    corrected = table.gain * raw + table.offset
    if table.mode == SHUTTERLESS:
        corrected = corrected + table.drift_slope * (frame.fpa_temp_c - table.t_amb_ref_c)
    out = np.clip(round_half_away(corrected), 0, frame.max_value)
    out = np.where(table.bad_pixels.flags, frame.samples, out)
    return frame.with_samples(out.astype(np.uint16))


def shutter_update_offset(table: CalibrationTable, shutter_frame: RawFrame) -> CalibrationTable:
    """Re-anchor offsets on a closed-shutter (uniform) frame, keeping gains and
    the mean corrected level of that frame."""
    if table.mode != SHUTTER:
        raise ModeMismatch("offset update applies to shutter tables only")
    if shutter_frame.shape != table.shape:
        raise DimensionMismatch("shutter frame shape differs from the table")
    good = ~table.bad_pixels.flags
    s = shutter_frame.samples.astype(np.float64)
    s_bar = float((table.gain * s + table.offset)[good].mean())
    offset = np.where(good, s_bar - table.gain * s, 0.0)
    return replace(table, offset=offset)


# --------------------------------------------------------------------------
# .cal I/O
# --------------------------------------------------------------------------

CAL_MAGIC = b"TCAL"
CAL_VERSION = 1
_CAL_HEADER = struct.Struct("<4sHBHHidd")


def save_table(table: CalibrationTable, path) -> None:
    """Write a ``.cal`` file: header, gain/offset/drift planes (f64, row-major),
    then the bad-pixel bitmap packed MSB-first with rows padded to bytes."""
    h, w = table.shape
    header = _CAL_HEADER.pack(
        CAL_MAGIC,
        CAL_VERSION,
        0 if table.mode == SHUTTER else 1,
        w,
        h,
        int(round(table.t_amb_ref_c * 1000.0)),
        table.target_cold,
        table.target_hot,
    )
    planes = b"".join(a.astype("<f8").tobytes() for a in (table.gain, table.offset, table.drift_slope))
    bitmap = np.packbits(table.bad_pixels.flags, axis=1).tobytes()
    try:
        Path(path).write_bytes(header + planes + bitmap)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_table(path) -> CalibrationTable:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) < _CAL_HEADER.size:
        raise MalformedHeader("calibration file shorter than its header")
    magic, version, mode, w, h, t_milli, t_cold, t_hot = _CAL_HEADER.unpack_from(data, 0)
    if magic != CAL_MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}, expected {CAL_MAGIC!r}")
    if version != CAL_VERSION or mode not in (0, 1) or w == 0 or h == 0:
        raise MalformedHeader(f"invalid calibration header (version {version}, mode {mode}, {w}x{h})")
    n = w * h
    row_bytes = (w + 7) // 8
    need = _CAL_HEADER.size + 3 * 8 * n + row_bytes * h
    if len(data) < need:
        raise TruncatedPayload(f"calibration file needs {need} bytes, has {len(data)}")
    pos = _CAL_HEADER.size
    planes = []
    for _ in range(3):
        planes.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(h, w))
        pos += 8 * n
    packed = np.frombuffer(data, dtype=np.uint8, count=row_bytes * h, offset=pos).reshape(h, row_bytes)
    flags = np.unpackbits(packed, axis=1, count=w).astype(bool)
    return CalibrationTable(
        SHUTTER if mode == 0 else SHUTTERLESS,
        planes[0],
        planes[1],
        planes[2],
        t_milli / 1000.0,
        t_cold,
        t_hot,
        BadPixelMap(flags),
    )
