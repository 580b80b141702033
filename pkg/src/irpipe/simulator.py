"""Forward model of an uncooled microbolometer array.

    raw_i = clamp(round(a_i * k * T_scene(i) + o_i + d_i * (fpa - t_ref)
                        + stripe(col_i) + flare(i) + eps), 0, 2**14 - 1)

with per-pixel gain ``a``, offset ``o``, offset drift ``d`` (per degC of FPA
temperature), per-column stripes, an optional Gaussian flare blob and white
temporal noise ``eps`` seeded by ``(seed, frame_index)``. Dead and hot pixels
are then forced to 0 and to the maximum code.

The default magnitudes are order-of-magnitude choices, not measured sensor
data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from irpipe.errors import DimensionMismatch, InvalidFrame, InvalidParams, TooFewFrames
from irpipe.frames import MIN_SIDE, FrameStack, RawFrame
from irpipe.nuc import BadPixelMap, CalibrationSetpoints

BIT_DEPTH = 14
MAX_CODE = (1 << BIT_DEPTH) - 1

_STREAM_TEMPORAL = 0x7E3
_STREAM_FIELDS = 0x0F1


@dataclass(frozen=True)
class Flare:
    center_x: float
    center_y: float
    sigma: float
    amplitude: float

    def render(self, height: int, width: int) -> np.ndarray:
        y, x = np.mgrid[0:height, 0:width].astype(np.float64)
        r2 = (x - self.center_x) ** 2 + (y - self.center_y) ** 2
        return self.amplitude * np.exp(-r2 / (2.0 * self.sigma**2))


@dataclass(frozen=True)
class NoiseParams:
    """Overridable knobs of ``build_noise_model``."""

    width: int = 160
    height: int = 120
    flux_per_degree: float = 100.0
    sigma_gain: float = 0.03
    sigma_offset: float = 200.0
    sigma_drift: float = 8.0
    t_ref_c: float = 25.0
    sigma_stripe: float = 20.0
    bad_fraction: float = 0.001
    temporal_sigma: float = 6.0
    flare: Flare | None = None

    def __post_init__(self):
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise InvalidFrame(f"simulated frames must be at least {MIN_SIDE}x{MIN_SIDE}")
        if min(self.sigma_gain, self.sigma_offset, self.sigma_drift, self.sigma_stripe, self.temporal_sigma) < 0:
            raise InvalidParams("noise magnitudes must be non-negative")
        if not 0 <= self.bad_fraction < 1:
            raise InvalidParams("bad_fraction must be in [0, 1)")

    @classmethod
    def ideal(cls, **kw) -> "NoiseParams":
        base = dict(
            sigma_gain=0.0,
            sigma_offset=0.0,
            sigma_drift=0.0,
            sigma_stripe=0.0,
            bad_fraction=0.0,
            temporal_sigma=0.0,
        )
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    seed: int
    params: NoiseParams
    gain_field: np.ndarray
    offset_field: np.ndarray
    drift_field: np.ndarray
    stripe_field: np.ndarray
    dead: BadPixelMap
    hot: BadPixelMap
    flare_field: np.ndarray | None = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return self.params.width

    @property
    def height(self) -> int:
        return self.params.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.params.height, self.params.width)

    @property
    def bad_pixels(self) -> BadPixelMap:
        return self.dead | self.hot

    def same_fields(self, other: "NoiseModel") -> bool:
        arrays = ("gain_field", "offset_field", "drift_field", "stripe_field")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays) and (
            self.dead == other.dead and self.hot == other.hot
        )


def build_noise_model(seed: int = 0, params: NoiseParams | None = None, **overrides) -> NoiseModel:
    """Draw every fixed-pattern field from a generator seeded with ``seed``."""
    params = params or NoiseParams()
    if overrides:
        params = replace(params, **overrides)
    h, w = params.height, params.width

    rng = np.random.default_rng([int(seed) & (2**64 - 1), _STREAM_FIELDS])
    gain = 1.0 + params.sigma_gain * rng.standard_normal((h, w))
    if np.any(gain <= 0):
        raise InvalidParams("sigma_gain too large: drew a non-positive pixel gain")
    offset = params.sigma_offset * rng.standard_normal((h, w))
    drift = params.sigma_drift * rng.standard_normal((h, w))
    stripes = params.sigma_stripe * rng.standard_normal(w)

    n_bad = int(round(params.bad_fraction * h * w))
    picks = rng.choice(h * w, size=n_bad, replace=False) if n_bad else np.empty(0, dtype=int)
    dead = np.zeros(h * w, dtype=bool)
    hot = np.zeros(h * w, dtype=bool)
    dead[picks[: (n_bad + 1) // 2]] = True
    hot[picks[(n_bad + 1) // 2 :]] = True

    flare = params.flare.render(h, w) if params.flare is not None else None
    return NoiseModel(
        seed=int(seed),
        params=params,
        gain_field=gain,
        offset_field=offset,
        drift_field=drift,
        stripe_field=stripes,
        dead=BadPixelMap(dead.reshape(h, w)),
        hot=BadPixelMap(hot.reshape(h, w)),
        flare_field=flare,
    )


@dataclass(frozen=True, eq=False)
class Scene:
    """Scene temperature map in degC."""

    temperature: np.ndarray

    def __post_init__(self):
        t = np.array(self.temperature, dtype=np.float64)
        if t.ndim != 2:
            raise InvalidFrame("scene temperature map must be 2-D")
        if t.min() < -20.0 or t.max() > 120.0:
            raise InvalidFrame("scene temperatures must lie in [-20, 120] degC")
        t.setflags(write=False)
        object.__setattr__(self, "temperature", t)

    @classmethod
    def flat(cls, height: int, width: int, temp_c: float) -> "Scene":
        return cls(np.full((height, width), float(temp_c)))

    @classmethod
    def targets(cls, height: int, width: int, base_c: float = 20.0, seed: int = 0) -> "Scene":
        """Smooth background gradient plus a few warm rectangles (pedestrian-ish)."""
        rng = np.random.default_rng([seed, 0x5CE])
        y, x = np.mgrid[0:height, 0:width].astype(np.float64)
        t = base_c + 4.0 * (y / height) + 2.0 * np.sin(2 * np.pi * x / width)
        for _ in range(4):
            bh = int(rng.integers(max(4, height // 8), max(5, height // 3)))
            bw = max(2, bh // 3)
            r0 = int(rng.integers(0, height - bh))
            c0 = int(rng.integers(0, width - bw))
            t[r0 : r0 + bh, c0 : c0 + bw] = base_c + 12.0 + 3.0 * rng.random()
        return cls(t)

    @property
    def shape(self):
        return self.temperature.shape

    def shifted(self, dx: int, dy: int = 0) -> "Scene":
        return Scene(np.roll(self.temperature, (dy, dx), axis=(0, 1)))


def _noise_free_response(scene: Scene, model: NoiseModel, fpa_temp_c: float) -> np.ndarray:
    p = model.params
    value = model.gain_field * (p.flux_per_degree * scene.temperature) + model.offset_field
    value = value + model.drift_field * (fpa_temp_c - p.t_ref_c) + model.stripe_field[None, :]
    if model.flare_field is not None:
        value = value + model.flare_field
    return value


def simulate_raw(
    scene: Scene,
    model: NoiseModel,
    fpa_temp_c: float,
    frame_index: int = 0,
    noise_seed: int | None = None,
) -> RawFrame:
    """Render one raw frame. ``noise_seed`` (default: the model seed) selects
    an independent temporal-noise stream for repeat runs."""
    if scene.shape != model.shape:
        raise DimensionMismatch(f"scene shape {scene.shape} differs from model shape {model.shape}")
    value = _noise_free_response(scene, model, fpa_temp_c)
    if model.params.temporal_sigma > 0:
        seed = model.seed if noise_seed is None else noise_seed
        rng = np.random.default_rng([int(seed) & (2**64 - 1), _STREAM_TEMPORAL, int(frame_index)])
        value = value + model.params.temporal_sigma * rng.standard_normal(model.shape)
    raw = np.clip(np.floor(value + 0.5), 0, MAX_CODE)
    raw[model.dead.flags] = 0
    raw[model.hot.flags] = MAX_CODE
    return RawFrame(raw.astype(np.uint16), fpa_temp_c=fpa_temp_c, bit_depth=BIT_DEPTH)


def render_clean(scene: Scene, model: NoiseModel, fpa_temp_c: float) -> RawFrame:
    """What a perfectly uniform array would read: every pixel responds like the
    array-average pixel, with no stripes, defects, flare or temporal noise.

    This is the level a two-point NUC maps the scene to, so it serves as the
    clean reference for PSNR.
    """
    p = model.params
    value = (
        model.gain_field.mean() * p.flux_per_degree * scene.temperature
        + model.offset_field.mean()
        + model.drift_field.mean() * (fpa_temp_c - p.t_ref_c)
        + model.stripe_field.mean()
    )
    raw = np.clip(np.floor(value + 0.5), 0, MAX_CODE)
    return RawFrame(raw.astype(np.uint16), fpa_temp_c=fpa_temp_c, bit_depth=BIT_DEPTH)


def simulate_stack(
    scenes,
    model: NoiseModel,
    fpa_temp_c: float,
    first_index: int = 0,
    noise_seed: int | None = None,
    tag: str = "",
) -> FrameStack:
    frames = tuple(
        simulate_raw(s, model, fpa_temp_c, first_index + i, noise_seed) for i, s in enumerate(scenes)
    )
    return FrameStack(frames, source_tag=tag)


def generate_calibration_set(
    model: NoiseModel,
    setpoints: CalibrationSetpoints,
    frames_per_ref: int = 16,
    noise_seed: int | None = None,
) -> tuple[FrameStack, FrameStack, FrameStack | None]:
    """Flat-field stacks for the cold, hot and (shutterless) third reference,
    with FPA temperature equal to the ambient setpoint."""
    if frames_per_ref < 2:
        raise TooFewFrames("calibration references need >= 2 frames")
    h, w = model.shape
    n = frames_per_ref
    cold_scene = Scene.flat(h, w, setpoints.t_scene_cold_c)
    hot_scene = Scene.flat(h, w, setpoints.t_scene_hot_c)
    cold = simulate_stack([cold_scene] * n, model, setpoints.t_amb_1_c, 1_000_000, noise_seed, "cold")
    hot = simulate_stack([hot_scene] * n, model, setpoints.t_amb_1_c, 2_000_000, noise_seed, "hot")
    ref_2 = None
    if setpoints.mode == "shutterless":
        scene_3 = Scene.flat(h, w, setpoints.t_scene_3_c)
        ref_2 = simulate_stack([scene_3] * n, model, setpoints.t_amb_2_c, 3_000_000, noise_seed, "ref2")
    return cold, hot, ref_2


def noise_param_names() -> list[str]:
    return [f.name for f in fields(NoiseParams) if f.name != "flare"]
