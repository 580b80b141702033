"""Thermal-infrared raw frame correction: NUC, correction stages, tonemapping,
a microbolometer simulator and an ablation benchmark harness."""

from irpipe.errors import IrPipeError
from irpipe.frames import (
    DisplayFrame,
    FrameStack,
    FrameStats,
    RawFrame,
    frame_stats,
    load_frames,
    save_frames,
)
from irpipe.nuc import (
    BadPixelMap,
    CalibrationSetpoints,
    CalibrationTable,
    apply_nuc,
    calibrate_shutter,
    calibrate_shutterless,
    detect_bad_pixels,
    load_table,
    save_table,
    shutter_update_offset,
)
from irpipe.tonemap import TonemapSpec, tonemap

__version__ = "0.1.0"

__all__ = [
    "IrPipeError",
    "RawFrame",
    "DisplayFrame",
    "FrameStack",
    "FrameStats",
    "frame_stats",
    "load_frames",
    "save_frames",
    "BadPixelMap",
    "CalibrationSetpoints",
    "CalibrationTable",
    "apply_nuc",
    "calibrate_shutter",
    "calibrate_shutterless",
    "detect_bad_pixels",
    "load_table",
    "save_table",
    "shutter_update_offset",
    "TonemapSpec",
    "tonemap",
]
