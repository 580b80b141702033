"""Frames, frame stacks, statistics and the on-disk formats.

Two formats are supported:

* ``.tir`` container, little-endian::

      file header (32 B)  magic "TIRS", version u16 = 1, width u16, height u16,
                          bit_depth u16, frame_count u32, 16 reserved zero bytes
      per frame  (16 B)   frame_index u32, fpa_temp_milli_c i32, 8 reserved bytes
                          followed by width*height u16 samples, row-major

* binary PGM (P5), maxval 16383 for ``pgm16`` and 255 for ``pgm8``. PGM has no
  place for the FPA temperature, so imports get ``PGM_DEFAULT_FPA_C``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from irpipe.errors import (
    DepthMismatch,
    DepthOverflow,
    InvalidFrame,
    IoFailure,
    MalformedHeader,
    TruncatedPayload,
)

MIN_SIDE = 16
DEFAULT_BIT_DEPTH = 14
PGM_DEFAULT_FPA_C = 25.0

TIR_MAGIC = b"TIRS"
TIR_VERSION = 1
_TIR_HEADER = struct.Struct("<4sHHHHI16x")
_TIR_FRAME_HEADER = struct.Struct("<Ii8x")


def _frozen_u16(samples) -> np.ndarray:
    arr = np.array(samples, dtype=np.uint16, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RawFrame:
    """Single-channel frame with 16-bit storage and ``bit_depth`` valid bits.

    ``samples`` is a read-only ``(height, width)`` uint16 array.
    """

    samples: np.ndarray
    fpa_temp_c: float = 25.0
    bit_depth: int = DEFAULT_BIT_DEPTH

    def __post_init__(self):
        raw = np.asarray(self.samples)
        if raw.ndim != 2:
            raise InvalidFrame(f"samples must be 2-D, got shape {raw.shape}")
        if not 1 <= int(self.bit_depth) <= 16:
            raise InvalidFrame(f"bit_depth must be in [1, 16], got {self.bit_depth}")
        h, w = raw.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise InvalidFrame(f"frame must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}")
        if raw.size and (raw.min() < 0 or raw.max() > (1 << int(self.bit_depth)) - 1):
            raise DepthOverflow(
                f"sample outside [0, {(1 << int(self.bit_depth)) - 1}] for bit_depth {self.bit_depth}"
            )
        t = float(self.fpa_temp_c)
        if not np.isfinite(t) or not -40.0 <= t <= 120.0:
            raise InvalidFrame(f"fpa_temp_c must be finite and within [-40, 120], got {t}")
        samples = raw if (raw.dtype == np.uint16 and not raw.flags.writeable) else _frozen_u16(raw)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fpa_temp_c", t)
        object.__setattr__(self, "bit_depth", int(self.bit_depth))

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    def with_samples(self, samples) -> "RawFrame":
        """Copy of this frame's metadata around new samples."""
        return RawFrame(samples, fpa_temp_c=self.fpa_temp_c, bit_depth=self.bit_depth)

    def __eq__(self, other):
        if not isinstance(other, RawFrame):
            return NotImplemented
        return (
            self.bit_depth == other.bit_depth
            and self.fpa_temp_c == other.fpa_temp_c
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DisplayFrame:
    """8-bit tonemapped output, ``(height, width)`` uint8."""

    samples: np.ndarray
    fpa_temp_c: float = 25.0

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim != 2:
            raise InvalidFrame("display samples must be 2-D")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise InvalidFrame("display samples must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        else:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    def to_raw(self) -> RawFrame:
        """View as an 8-bit ``RawFrame`` so it can go through ``save_frames``."""
        return RawFrame(self.samples.astype(np.uint16), fpa_temp_c=self.fpa_temp_c, bit_depth=8)

    def __eq__(self, other):
        if not isinstance(other, DisplayFrame):
            return NotImplemented
        return np.array_equal(self.samples, other.samples)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Ordered, non-empty, shape- and depth-homogeneous sequence of frames."""

    frames: tuple[RawFrame, ...]
    source_tag: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidFrame("a FrameStack needs at least one frame")
        first = frames[0]
        for i, fr in enumerate(frames):
            if not isinstance(fr, RawFrame):
                raise InvalidFrame(f"frame {i} is not a RawFrame")
            if fr.shape != first.shape or fr.bit_depth != first.bit_depth:
                raise InvalidFrame(
                    f"frame {i} is {fr.width}x{fr.height}@{fr.bit_depth}b, "
                    f"expected {first.width}x{first.height}@{first.bit_depth}b"
                )
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, idx):
        return self.frames[idx]

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    @property
    def bit_depth(self) -> int:
        return self.frames[0].bit_depth

    def as_array(self, dtype=np.float64) -> np.ndarray:
        """``(n, height, width)`` array of all samples."""
        return np.stack([f.samples for f in self.frames]).astype(dtype, copy=False)

    def temporal_mean(self) -> np.ndarray:
        return self.as_array().mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, FrameStack):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self.frames, other.frames))

    __hash__ = None


@dataclass(frozen=True)
class FrameStats:
    mean: float
    std: float
    min: int
    max: int
    histogram: np.ndarray = field(repr=False)


def frame_stats(frame: RawFrame) -> FrameStats:
    """Population statistics and the full ``2**bit_depth``-bin histogram."""
    flat = frame.samples.ravel()
    hist = np.bincount(flat, minlength=1 << frame.bit_depth)
    lo, hi = int(flat.min()), int(flat.max())
    if lo == hi:
        return FrameStats(float(lo), 0.0, lo, hi, hist)
    values = flat.astype(np.float64)
    mean = float(values.mean())
    # clamp guards against the mean landing one ulp outside [min, max]
    mean = min(max(mean, lo), hi)
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    return FrameStats(mean, std, lo, hi, hist)


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------

def _milli(t: float) -> int:
    return int(round(t * 1000.0))


def _write_tir(stack: FrameStack, path: Path) -> None:
    h, w = stack.shape
    parts = [_TIR_HEADER.pack(TIR_MAGIC, TIR_VERSION, w, h, stack.bit_depth, len(stack))]
    for i, fr in enumerate(stack.frames):
        parts.append(_TIR_FRAME_HEADER.pack(i, _milli(fr.fpa_temp_c)))
        parts.append(fr.samples.astype("<u2", copy=False).tobytes())
    path.write_bytes(b"".join(parts))


def _read_tir(data: bytes, tag: str) -> FrameStack:
    if len(data) < _TIR_HEADER.size:
        raise MalformedHeader(f"file is {len(data)} bytes, shorter than the 32-byte header")
    magic, version, w, h, depth, count = _TIR_HEADER.unpack_from(data, 0)
    if magic != TIR_MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}, expected {TIR_MAGIC!r}")
    if version != TIR_VERSION:
        raise MalformedHeader(f"unsupported container version {version}")
    if not 1 <= depth <= 16 or w < MIN_SIDE or h < MIN_SIDE or count == 0:
        raise MalformedHeader(f"invalid header fields: {w}x{h}, bit_depth {depth}, {count} frames")
    frame_bytes = _TIR_FRAME_HEADER.size + 2 * w * h
    need = _TIR_HEADER.size + count * frame_bytes
    if len(data) < need:
        raise TruncatedPayload(
            f"header declares {count} frames ({need} bytes) but file holds {len(data)} bytes"
        )
    limit = (1 << depth) - 1
    frames = []
    pos = _TIR_HEADER.size
    for i in range(count):
        _index, milli = _TIR_FRAME_HEADER.unpack_from(data, pos)
        pos += _TIR_FRAME_HEADER.size
        samples = np.frombuffer(data, dtype="<u2", count=w * h, offset=pos).reshape(h, w)
        pos += 2 * w * h
        if samples.max() > limit:
            raise DepthOverflow(f"frame {i} has a sample above {limit}")
        frames.append(RawFrame(samples.astype(np.uint16), fpa_temp_c=milli / 1000.0, bit_depth=depth))
    return FrameStack(tuple(frames), source_tag=tag)


# --------------------------------------------------------------------------
# PGM I/O
# --------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def _parse_pgm_header(data: bytes, pos: int) -> tuple[int, int, int, int]:
    values = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeader("incomplete PGM header")
        values.append(m.group(1))
        pos = m.end()
    if values[0] != b"P5":
        raise MalformedHeader(f"bad PGM magic {values[0][:8]!r}, expected b'P5'")
    try:
        w, h, maxval = (int(v) for v in values[1:])
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric PGM header field: {exc}") from None
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise MalformedHeader(f"invalid PGM header: {w}x{h}, maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedHeader("missing whitespace after PGM maxval")
    return w, h, maxval, pos + 1


def _read_pgm(data: bytes, tag: str, fpa_temp_c: float = PGM_DEFAULT_FPA_C) -> list[RawFrame]:
    frames = []
    pos = 0
    while pos < len(data) and data[pos:].strip():
        w, h, maxval, pos = _parse_pgm_header(data, pos)
        wide = maxval > 255
        nbytes = w * h * (2 if wide else 1)
        if len(data) - pos < nbytes:
            raise TruncatedPayload(f"PGM raster needs {nbytes} bytes, {len(data) - pos} available")
        dtype = ">u2" if wide else "u1"
        samples = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
        pos += nbytes
        if samples.max() > maxval:
            raise DepthOverflow(f"PGM sample exceeds maxval {maxval}")
        depth = int(maxval).bit_length()
        if samples.max() > (1 << depth) - 1:
            raise DepthOverflow(f"PGM sample exceeds 2^{depth} - 1")
        frames.append(RawFrame(samples.astype(np.uint16), fpa_temp_c=fpa_temp_c, bit_depth=depth))
    if not frames:
        raise MalformedHeader(f"no PGM image found in {tag}")
    return frames


def _pgm_bytes(frame: RawFrame, maxval: int) -> bytes:
    header = f"P5\n{frame.width} {frame.height}\n{maxval}\n".encode("ascii")
    if maxval > 255:
        body = frame.samples.astype(">u2").tobytes()
    else:
        body = frame.samples.astype(np.uint8).tobytes()
    return header + body


def pgm_frame_paths(path: Path, count: int) -> list[Path]:
    """Per-frame file names written by ``save_frames`` for PGM formats."""
    path = Path(path)
    suffix = path.suffix or ".pgm"
    return [path.with_name(f"{path.stem}_{i:04d}{suffix}") for i in range(count)]


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def load_frames(path, format: str = "container") -> FrameStack:
    """Read a ``.tir`` container or PGM image(s) into a ``FrameStack``.

    For ``pgm16`` the path may be a single file (possibly holding several
    concatenated P5 images) or a directory, whose ``*.pgm`` files are read in
    name order.
    """
    path = Path(path)
    try:
        if format == "container":
            return _read_tir(path.read_bytes(), str(path))
        if format in ("pgm16", "pgm8", "pgm"):
            files = sorted(path.glob("*.pgm")) if path.is_dir() else [path]
            if not files:
                raise MalformedHeader(f"no .pgm files in {path}")
            frames = []
            for f in files:
                frames.extend(_read_pgm(f.read_bytes(), str(f)))
            return FrameStack(tuple(frames), source_tag=str(path))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except InvalidFrame as exc:
        raise MalformedHeader(str(exc)) from exc
    raise ValueError(f"unknown frame format {format!r}")


def save_frames(stack: FrameStack, path, format: str = "container") -> list[Path]:
    """Write ``stack``; returns the files written.

    PGM formats write one file per frame, ``<stem>_<index><suffix>``.
    """
    path = Path(path)
    if format not in ("container", "pgm16", "pgm8"):
        raise ValueError(f"unknown frame format {format!r}")
    if format == "pgm8" and stack.bit_depth > 8:
        raise DepthMismatch(f"pgm8 needs bit_depth <= 8, stack has {stack.bit_depth}")
    try:
        if format == "container":
            _write_tir(stack, path)
            return [path]
        maxval = 255 if format == "pgm8" else 16383
        if stack.bit_depth > 14 and format == "pgm16":
            raise DepthMismatch(f"pgm16 holds at most 14 bits, stack has {stack.bit_depth}")
        out = pgm_frame_paths(path, len(stack))
        for fr, p in zip(stack.frames, out):
            p.write_bytes(_pgm_bytes(fr, maxval))
        return out
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def stack_from_arrays(
    arrays: Iterable[np.ndarray],
    fpa_temps: Sequence[float] | float = 25.0,
    bit_depth: int = DEFAULT_BIT_DEPTH,
    source_tag: str = "",
) -> FrameStack:
    arrays = list(arrays)
    if np.isscalar(fpa_temps):
        fpa_temps = [float(fpa_temps)] * len(arrays)
    frames = tuple(RawFrame(a, fpa_temp_c=t, bit_depth=bit_depth) for a, t in zip(arrays, fpa_temps))
    return FrameStack(frames, source_tag=source_tag)
