"""``key = value`` configuration files.

Sections and keys are fixed by ``KEY_TABLE``; anything else is rejected with
its line number. ``#`` starts a comment. Lists are comma-separated; numeric
lists also accept an inclusive ``start:stop:step`` range (``10:50:5``).
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from irpipe.errors import ConfigInvalid, IrPipeError
from irpipe.nuc import CalibrationSetpoints
from irpipe.pipeline import PipelineConfig, StageParams
from irpipe.simulator import Flare, NoiseParams, Scene
from irpipe.stages import (
    BprParams,
    DestripeParams,
    FlareParams,
    SpatialDenoiseParams,
    TemporalDenoiseParams,
)
from irpipe.tonemap import TonemapSpec

INT, FLOAT, BOOL, STR, FLOATS, STRS = "int", "float", "bool", "str", "floats", "strs"

KEY_TABLE: dict[str, dict[str, str]] = {
    "simulator": {
        "seed": INT,
        "width": INT,
        "height": INT,
        "flux_per_degree": FLOAT,
        "sigma_gain": FLOAT,
        "sigma_offset": FLOAT,
        "sigma_drift": FLOAT,
        "t_ref_c": FLOAT,
        "sigma_stripe": FLOAT,
        "bad_fraction": FLOAT,
        "temporal_sigma": FLOAT,
        "flare_center_x": FLOAT,
        "flare_center_y": FLOAT,
        "flare_sigma": FLOAT,
        "flare_amplitude": FLOAT,
        "scene": STR,  # flat | targets
        "scene_temp_c": FLOAT,
        "fpa_temp_c": FLOAT,
        "motion_x": INT,
        "motion_y": INT,
    },
    "pipeline": {
        "mode": STR,
        "table": STR,
        "destrip": BOOL,
        "bpr": BOOL,
        "sdn": BOOL,
        "tdn": BOOL,
        "flare": BOOL,
    },
    "stages.bpr": {"kernel": FLOATS},
    "stages.destrip": {"smooth_window": INT},
    "stages.sdn": {
        "method": STR,
        "sigma_spatial": FLOAT,
        "sigma_range": FLOAT,
        "patch_radius": INT,
        "search_radius": INT,
        "h": FLOAT,
    },
    "stages.tdn": {"block": INT, "search_radius": INT, "blend_alpha": FLOAT, "sad_reject": FLOAT},
    "stages.flare": {"background_sigma": FLOAT, "max_removal_fraction": FLOAT},
    "tonemap": {
        "algorithm": STR,
        "lo": FLOAT,
        "hi": FLOAT,
        "tiles_x": INT,
        "tiles_y": INT,
        "clip_limit": FLOAT,
        "knee_percentiles": FLOATS,
        "knee_outputs": FLOATS,
        "clip_percentiles": FLOATS,
        "target_median": FLOAT,
        "plateau": FLOAT,
    },
    "sweep": {
        "frames": INT,
        "frames_per_ref": INT,
        "master_seed": INT,
        "ambients": FLOATS,
        "eval_grid": FLOATS,
        "eval_scene_c": FLOAT,
        "algorithms": STRS,
        "t_amb_1_c": FLOAT,
        "t_amb_2_c": FLOAT,
        "t_scene_3_c": FLOAT,
        "t_scene_cold_c": FLOAT,
        "t_scene_hot_c": FLOAT,
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _floats(text: str) -> list[float]:
    text = text.strip()
    if ":" in text and "," not in text:
        start, stop, step = (float(p) for p in text.split(":"))
        if step <= 0:
            raise ValueError("range step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(max(n, 0))]
    return [float(p) for p in text.split(",") if p.strip()]


def _convert(kind: str, text: str):
    if kind == INT:
        return int(text)
    if kind == FLOAT:
        return float(text)
    if kind == BOOL:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == FLOATS:
        return _floats(text)
    if kind == STRS:
        return [p.strip() for p in text.split(",") if p.strip()]
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config(text: str) -> dict[str, dict[str, object]]:
    """Parse config text into ``{section: {key: typed value}}``."""
    out: dict[str, dict[str, object]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigInvalid(f"malformed section header {stripped!r}", lineno)
            section = stripped[1:-1].strip()
            if section not in KEY_TABLE:
                raise ConfigInvalid(f"unknown section [{section}]", lineno)
            out.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigInvalid(f"expected 'key = value', got {stripped!r}", lineno)
        if section is None:
            raise ConfigInvalid("key outside of any [section]", lineno)
        key, value = (p.strip() for p in stripped.split("=", 1))
        kinds = KEY_TABLE[section]
        if key not in kinds:
            raise ConfigInvalid(f"unknown key {key!r} in [{section}]", lineno)
        if key in out[section]:
            raise ConfigInvalid(f"duplicate key {key!r} in [{section}]", lineno)
        try:
            out[section][key] = _convert(kinds[key], value)
        except ValueError as exc:
            raise ConfigInvalid(f"bad value for {key!r}: {exc}", lineno) from None
    return out


def load_config(path) -> dict[str, dict[str, object]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def _build(what: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigInvalid:
        raise
    except (IrPipeError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid {what}: {exc}") from exc


def noise_params(cfg: dict) -> tuple[int, NoiseParams]:
    sim = dict(cfg.get("simulator", {}))
    seed = int(sim.pop("seed", 0))
    flare_keys = ("flare_center_x", "flare_center_y", "flare_sigma", "flare_amplitude")
    flare_vals = {k: sim.pop(k) for k in flare_keys if k in sim}
    for k in ("scene", "scene_temp_c", "fpa_temp_c", "motion_x", "motion_y"):
        sim.pop(k, None)
    params = _build("simulator section", NoiseParams, **sim)
    if flare_vals:
        w, h = params.width, params.height
        flare = Flare(
            flare_vals.get("flare_center_x", w / 2.0),
            flare_vals.get("flare_center_y", h / 2.0),
            flare_vals.get("flare_sigma", w / 4.0),
            flare_vals.get("flare_amplitude", 0.0),
        )
        params = replace(params, flare=flare)
    return seed, params


def scenes(cfg: dict, params: NoiseParams, frames: int, seed: int = 0) -> list[Scene]:
    """Scene sequence described by the [simulator] section."""
    sim = cfg.get("simulator", {})
    kind = sim.get("scene", "flat")
    temp = float(sim.get("scene_temp_c", 25.0))
    h, w = params.height, params.width
    if kind == "flat":
        base = _build("scene", Scene.flat, h, w, temp)
    elif kind == "targets":
        base = _build("scene", Scene.targets, h, w, temp, seed)
    else:
        raise ConfigInvalid(f"unknown scene kind {kind!r} (flat|targets)")
    mx, my = int(sim.get("motion_x", 0)), int(sim.get("motion_y", 0))
    return [base.shifted(mx * i, my * i) if (mx or my) else base for i in range(frames)]


def stage_params(cfg: dict) -> StageParams:
    p = StageParams()
    if "stages.bpr" in cfg and "kernel" in cfg["stages.bpr"]:
        k = np.asarray(cfg["stages.bpr"]["kernel"], dtype=np.float64)
        if k.size != 25:
            raise ConfigInvalid("stages.bpr kernel needs 25 values (5x5, row-major)")
        p = replace(p, bpr=_build("stages.bpr", BprParams, k.reshape(5, 5)))
    builders = {
        "stages.destrip": ("destrip", DestripeParams),
        "stages.sdn": ("sdn", SpatialDenoiseParams),
        "stages.tdn": ("tdn", TemporalDenoiseParams),
        "stages.flare": ("flare", FlareParams),
    }
    for section, (attr, cls) in builders.items():
        if section in cfg:
            p = replace(p, **{attr: _build(section, cls, **cfg[section])})
    return p


def tonemap_spec(cfg: dict) -> TonemapSpec:
    tm = dict(cfg.get("tonemap", {}))
    for key in ("knee_percentiles", "knee_outputs", "clip_percentiles"):
        if key in tm:
            tm[key] = tuple(tm[key])
    return _build("tonemap section", TonemapSpec, **tm)


def pipeline_config(cfg: dict, table=None) -> PipelineConfig:
    pipe = dict(cfg.get("pipeline", {}))
    table_path = pipe.pop("table", None)
    return _build(
        "pipeline section",
        PipelineConfig,
        table=table if table is not None else table_path,
        params=stage_params(cfg),
        tonemap=tonemap_spec(cfg),
        **pipe,
    )


def setpoints(cfg: dict, mode: str) -> CalibrationSetpoints:
    """Calibration setpoints from [sweep]; defaults are 10/40 degC scenes at
    25 degC (shutter) or 30/35 degC ambients with a 10 degC third scene."""
    sw = cfg.get("sweep", {})
    cold = sw.get("t_scene_cold_c", 10.0)
    hot = sw.get("t_scene_hot_c", 40.0)
    if mode == "shutter":
        return _build("setpoints", CalibrationSetpoints, sw.get("t_amb_1_c", 25.0), cold, hot)
    return _build(
        "setpoints",
        CalibrationSetpoints,
        sw.get("t_amb_1_c", 30.0),
        cold,
        hot,
        sw.get("t_amb_2_c", 35.0),
        sw.get("t_scene_3_c", cold),
    )
