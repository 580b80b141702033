"""Stage chains, per-stage timing, and the three experiment sweeps.

Stage order is fixed: NUC -> BPR -> destrip -> SDN -> TDN -> flare -> tonemap.

Timing reference points for orientation only (they are hardware specific and
never asserted): a shutter baseline of NUC plus dynamic tonemapping at about
2 ms per image, a shutterless baseline at about 32 ms per image, destriping
adding 10-11 ms, flare correction 8 ms, temporal denoising 1-2 ms, and
bad-pixel replacement a negligible amount.
"""

from __future__ import annotations

import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from irpipe.errors import ConfigInvalid, DimensionMismatch
from irpipe.frames import DisplayFrame, FrameStack, RawFrame
from irpipe.metrics import QualityMetrics, quality_metrics, rnu_percent
from irpipe.nuc import (
    SHUTTER,
    SHUTTERLESS,
    CalibrationSetpoints,
    CalibrationTable,
    apply_nuc,
    calibrate_shutter,
    calibrate_shutterless,
    load_table,
)
from irpipe.simulator import (
    NoiseModel,
    Scene,
    generate_calibration_set,
    render_clean,
    simulate_raw,
    simulate_stack,
)
from irpipe.stages import (
    BprParams,
    DestripeParams,
    FlareParams,
    SpatialDenoiseParams,
    TdnState,
    TemporalDenoiseParams,
    destripe,
    flare_correct,
    replace_bad_pixels,
    spatial_denoise,
    temporal_denoise,
)
from irpipe.tonemap import ALGORITHMS, TonemapSpec, tonemap

STAGE_ORDER = ("nuc", "bpr", "destrip", "sdn", "tdn", "flare", "tonemap")
# power-set bit order: destrip is the least significant bit
FLAG_ORDER = ("destrip", "bpr", "sdn", "tdn", "flare")
SHUTTER_FLAGS = FLAG_ORDER[:4]
DEFAULT_EVAL_GRID = tuple(float(t) for t in range(10, 51, 5))


@dataclass(frozen=True)
class StageParams:
    bpr: BprParams = field(default_factory=BprParams)
    destrip: DestripeParams = field(default_factory=DestripeParams)
    sdn: SpatialDenoiseParams = field(default_factory=SpatialDenoiseParams)
    tdn: TemporalDenoiseParams = field(default_factory=TemporalDenoiseParams)
    flare: FlareParams = field(default_factory=FlareParams)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = SHUTTER
    table: Union[CalibrationTable, str, Path, None] = None
    destrip: bool = False
    bpr: bool = False
    sdn: bool = False
    tdn: bool = False
    flare: bool = False
    params: StageParams = field(default_factory=StageParams)
    tonemap: TonemapSpec = field(default_factory=TonemapSpec)

    def __post_init__(self):
        if self.mode not in (SHUTTER, SHUTTERLESS):
            raise ConfigInvalid(f"unknown mode {self.mode!r}")
        if self.flare and self.mode != SHUTTERLESS:
            raise ConfigInvalid("flare correction is only available in shutterless mode")

    @property
    def flags(self) -> dict[str, bool]:
        return {name: bool(getattr(self, name)) for name in FLAG_ORDER}

    @property
    def mode_flags(self) -> tuple[str, ...]:
        return FLAG_ORDER if self.mode == SHUTTERLESS else SHUTTER_FLAGS

    @property
    def descriptor(self) -> str:
        on = [n for n in FLAG_ORDER if getattr(self, n)]
        return "+".join(on) if on else "baseline"

    def with_flags(self, **flags) -> "PipelineConfig":
        return replace(self, **flags)

    def resolved_table(self) -> CalibrationTable:
        if self.table is None:
            raise ConfigInvalid("pipeline config has no calibration table")
        table = self.table if isinstance(self.table, CalibrationTable) else load_table(self.table)
        if table.mode != self.mode:
            raise ConfigInvalid(f"config mode {self.mode!r} but table mode {table.mode!r}")
        return table


@dataclass(frozen=True)
class StageTiming:
    mean_ms: float
    min_ms: float
    max_ms: float


@dataclass(frozen=True)
class TimingReport:
    stages: dict[str, StageTiming]
    total: StageTiming
    frames: int
    host: str

    # documented measurement slack between the total and the stage sum
    SLACK = 0.05

    @classmethod
    def from_records(cls, records: Sequence[dict[str, float]], totals: Sequence[float]) -> "TimingReport":
        if not records:
            raise ValueError("timing needs at least one frame")
        stages = {}
        for name in STAGE_ORDER:
            vals = [r[name] for r in records if name in r]
            if vals:
                stages[name] = StageTiming(float(np.mean(vals)), float(min(vals)), float(max(vals)))
        total = StageTiming(float(np.mean(totals)), float(min(totals)), float(max(totals)))
        return cls(stages, total, len(records), host_descriptor())

    def stage_sum_ms(self) -> float:
        return sum(s.mean_ms for s in self.stages.values())

    def consistent(self) -> bool:
        return self.total.mean_ms >= self.stage_sum_ms() * (1.0 - self.SLACK)


def host_descriptor() -> str:
    return f"{platform.node()} {platform.machine()} {platform.python_implementation()}-{platform.python_version()}"


class Pipeline:
    """A configured stage chain with its own temporal-denoise state."""

    def __init__(self, config: PipelineConfig, table: CalibrationTable | None = None):
        self.config = config
        self.table = table if table is not None else config.resolved_table()
        p = config.params
        self.tdn_state = TdnState(p.tdn)
        chain: list[tuple[str, Callable[[RawFrame], RawFrame]]] = [("nuc", self._nuc)]
        if config.bpr:
            chain.append(("bpr", lambda f: replace_bad_pixels(f, self.table.bad_pixels, p.bpr)))
        if config.destrip:
            chain.append(("destrip", lambda f: destripe(f, p.destrip)))
        if config.sdn:
            chain.append(("sdn", lambda f: spatial_denoise(f, p.sdn)))
        if config.tdn:
            chain.append(("tdn", self._tdn))
        if config.flare:
            chain.append(("flare", lambda f: flare_correct(f, p.flare)))
        self.chain = chain

    def _nuc(self, frame: RawFrame) -> RawFrame:
        return apply_nuc(frame, self.table)

    def _tdn(self, frame: RawFrame) -> RawFrame:
        out, self.tdn_state = temporal_denoise(self.tdn_state, frame, self.config.params.tdn)
        return out

    @property
    def stage_names(self) -> list[str]:
        return [name for name, _ in self.chain] + ["tonemap"]

    def process(self, frame: RawFrame) -> tuple[DisplayFrame, RawFrame, dict[str, float], float]:
        """Run one frame; returns display, pre-tonemap frame, per-stage ms, total ms."""
        if frame.shape != self.table.shape:
            raise DimensionMismatch(
                f"frame is {frame.width}x{frame.height}, table is {self.table.width}x{self.table.height}"
            )
        timings = {}
        clock = time.perf_counter
        start = clock()
        current = frame
        for name, fn in self.chain:
            t0 = clock()
            current = fn(current)
            timings[name] = (clock() - t0) * 1e3
        t0 = clock()
        display = tonemap(current, self.config.tonemap)
        timings["tonemap"] = (clock() - t0) * 1e3
        total = (clock() - start) * 1e3
        return display, current, timings, total


@dataclass
class PipelineResult:
    display: list[DisplayFrame]
    corrected: FrameStack
    metrics: list[QualityMetrics]
    timing: TimingReport

    def display_stack(self) -> FrameStack:
        return FrameStack(tuple(d.to_raw() for d in self.display), source_tag="display")


def run_pipeline(
    config: PipelineConfig,
    stack: FrameStack,
    clean: FrameStack | None = None,
    table: CalibrationTable | None = None,
) -> PipelineResult:
    """Process ``stack`` in order, threading temporal-denoise state through it.

    Metrics are computed on the pre-tonemap frames, against ``clean`` when
    given.
    """
    pipe = Pipeline(config, table)
    if clean is not None and (len(clean) != len(stack) or clean.shape != stack.shape):
        raise DimensionMismatch("clean stack must match the input stack frame for frame")
    displays, corrected, metrics, records, totals = [], [], [], [], []
    for i, frame in enumerate(stack.frames):
        display, out, timings, total = pipe.process(frame)
        displays.append(display)
        corrected.append(out)
        metrics.append(quality_metrics(out, clean.frames[i] if clean is not None else None))
        records.append(timings)
        totals.append(total)
    return PipelineResult(
        displays,
        FrameStack(tuple(corrected), source_tag="corrected"),
        metrics,
        TimingReport.from_records(records, totals),
    )


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

StackSource = Callable[[int], "tuple[FrameStack, FrameStack | None]"]


@dataclass(frozen=True)
class SimulatedSequence:
    """Renders a raw stack and its clean reference for a given noise seed, so
    sweep repeats see fresh temporal noise over identical fixed patterns."""

    model: NoiseModel
    scenes: tuple[Scene, ...]
    fpa_temp_c: float = 25.0

    def __call__(self, noise_seed: int) -> tuple[FrameStack, FrameStack]:
        raw = simulate_stack(self.scenes, self.model, self.fpa_temp_c, noise_seed=noise_seed, tag="sim")
        clean = FrameStack(
            tuple(render_clean(s, self.model, self.fpa_temp_c) for s in self.scenes), source_tag="clean"
        )
        return raw, clean


@dataclass
class SweepRow:
    descriptor: str
    flags: dict[str, bool]
    tonemap: str
    metrics: dict[str, tuple[float, float]]
    timing: TimingReport
    extra: dict[str, float] = field(default_factory=dict)
    baseline: bool = False


@dataclass
class SweepReport:
    axis: str
    rows: list[SweepRow]
    repeats: int

    def __len__(self):
        return len(self.rows)


def repeat_seeds(master_seed: int, repeats: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(repeats, dtype=np.uint32)]


def worker_count() -> int:
    """Worker threads for independent sweep rows (``IRPIPE_THREADS``; unset
    means sequential, 0 means one per CPU)."""
    raw = os.environ.get("IRPIPE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    if n <= 0:
        return os.cpu_count() or 1
    return n


def _map_rows(fn, items):
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return (math.nan, math.nan)
    return float(arr.mean()), float(arr.std())


def _merge_timing(reports: Sequence[TimingReport]) -> TimingReport:
    """Frame-weighted merge of per-repeat timing reports."""
    if len(reports) == 1:
        return reports[0]
    frames = sum(r.frames for r in reports)
    stages = {}
    for name in STAGE_ORDER:
        parts = [r for r in reports if name in r.stages]
        if parts:
            mean = sum(r.stages[name].mean_ms * r.frames for r in parts) / sum(r.frames for r in parts)
            stages[name] = StageTiming(
                mean, min(r.stages[name].min_ms for r in parts), max(r.stages[name].max_ms for r in parts)
            )
    total = StageTiming(
        sum(r.total.mean_ms * r.frames for r in reports) / frames,
        min(r.total.min_ms for r in reports),
        max(r.total.max_ms for r in reports),
    )
    return TimingReport(stages, total, frames, reports[0].host)


def _resolve_source(stack, clean) -> StackSource:
    if isinstance(stack, FrameStack):
        return lambda _seed: (stack, clean)
    return stack


def _aggregate(results: Sequence[PipelineResult]) -> dict[str, tuple[float, float]]:
    per_repeat = {"rnu": [], "psnr": [], "cni": []}
    for res in results:
        per_repeat["rnu"].append(float(np.mean([m.rnu_percent for m in res.metrics])))
        psnrs = [m.psnr_db for m in res.metrics if m.psnr_db is not None]
        per_repeat["psnr"].append(float(np.mean(psnrs)) if psnrs else None)
        per_repeat["cni"].append(float(np.mean([m.cni for m in res.metrics])))
    return {k: _mean_std(v) for k, v in per_repeat.items()}


def powerset_configs(base: PipelineConfig) -> list[PipelineConfig]:
    """All on/off combinations of the mode's stage flags, binary-counting
    order with destrip as the least significant bit."""
    names = base.mode_flags
    out = []
    for i in range(1 << len(names)):
        flags = {n: bool((i >> b) & 1) for b, n in enumerate(names)}
        if base.mode != SHUTTERLESS:
            flags["flare"] = False
        out.append(base.with_flags(**flags))
    return out


def sweep_stage_powerset(
    base: PipelineConfig,
    stack: FrameStack | StackSource,
    clean: FrameStack | None = None,
    repeats: int = 5,
    master_seed: int = 0,
) -> SweepReport:
    """Run every stage combination ``repeats`` times.

    ``stack`` is either a fixed ``FrameStack`` or a callable mapping a noise
    seed to ``(stack, clean)``; the latter re-seeds temporal noise per repeat.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    source = _resolve_source(stack, clean)
    seeds = repeat_seeds(master_seed, repeats)
    inputs = [source(s) for s in seeds]
    table = base.resolved_table()

    def run_row(cfg: PipelineConfig) -> SweepRow:
        results = [run_pipeline(cfg, st, cl, table) for st, cl in inputs]
        return SweepRow(
            descriptor=cfg.descriptor,
            flags=cfg.flags,
            tonemap=cfg.tonemap.algorithm,
            metrics=_aggregate(results),
            timing=_merge_timing([r.timing for r in results]),
            baseline=not any(cfg.flags.values()),
        )

    rows = _map_rows(run_row, powerset_configs(base))
    return SweepReport("powerset", rows, repeats)


def _display_stats(displays: Sequence[DisplayFrame]) -> tuple[float, float]:
    hist = np.zeros(256, dtype=np.int64)
    for d in displays:
        hist += np.bincount(d.samples.ravel(), minlength=256)
    p = hist[hist > 0] / hist.sum()
    entropy = float(-(p * np.log2(p)).sum()) + 0.0
    saturated = float((hist[0] + hist[255]) / hist.sum())
    return entropy, saturated


def sweep_tonemap(
    base: PipelineConfig,
    stack: FrameStack | StackSource,
    algorithms: Sequence[str] = ALGORITHMS,
    repeats: int = 1,
    clean: FrameStack | None = None,
    master_seed: int = 0,
) -> SweepReport:
    """One row per tonemap algorithm with display-domain statistics."""
    algorithms = list(algorithms)
    if not algorithms or any(a not in ALGORITHMS for a in algorithms):
        raise ConfigInvalid(f"algorithms must be a non-empty subset of {ALGORITHMS}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    source = _resolve_source(stack, clean)
    inputs = [source(s) for s in repeat_seeds(master_seed, repeats)]
    table = base.resolved_table()

    def run_row(algo: str) -> SweepRow:
        cfg = replace(base, tonemap=replace(base.tonemap, algorithm=algo))
        results = [run_pipeline(cfg, st, cl, table) for st, cl in inputs]
        ent, sat = zip(*(_display_stats(r.display) for r in results))
        e_mean, e_std = _mean_std(ent)
        s_mean, s_std = _mean_std(sat)
        return SweepRow(
            descriptor=algo,
            flags=cfg.flags,
            tonemap=algo,
            metrics=_aggregate(results),
            timing=_merge_timing([r.timing for r in results]),
            extra={"entropy_bits": e_mean, "entropy_std": e_std, "saturated_fraction": s_mean},
        )

    return SweepReport("tonemap", _map_rows(run_row, algorithms), repeats)


def setpoints_for_ambient(base: CalibrationSetpoints, ambient_c: float, mode: str, amb_step: float = 5.0):
    """Calibration setpoints with ``t_amb_1_c = ambient_c``; in shutterless
    mode the second ambient sits ``amb_step`` above (below near the top)."""
    if mode == SHUTTER:
        return CalibrationSetpoints(ambient_c, base.t_scene_cold_c, base.t_scene_hot_c)
    amb_2 = ambient_c + amb_step if ambient_c + amb_step <= 60.0 else ambient_c - amb_step
    scene_3 = base.t_scene_3_c if base.t_scene_3_c is not None else base.t_scene_cold_c
    return CalibrationSetpoints(ambient_c, base.t_scene_cold_c, base.t_scene_hot_c, amb_2, scene_3)


def calibrate_from_model(
    model: NoiseModel,
    setpoints: CalibrationSetpoints,
    frames_per_ref: int = 32,
    noise_seed: int | None = None,
) -> CalibrationTable:
    cold, hot, ref_2 = generate_calibration_set(model, setpoints, frames_per_ref, noise_seed)
    if ref_2 is None:
        return calibrate_shutter(cold, hot, setpoints)
    return calibrate_shutterless(cold, hot, ref_2, setpoints)


def evaluate_rnu_grid(
    table: CalibrationTable,
    model: NoiseModel,
    grid: Sequence[float] = DEFAULT_EVAL_GRID,
    scene_c: float = 25.0,
    noise_seed: int | None = None,
    first_index: int = 500_000,
) -> tuple[list[float], list[float]]:
    """Correct one flat field per operating temperature in ``grid``; returns
    the RNU (%) over good pixels per temperature and the NUC times (ms)."""
    scene = Scene.flat(*model.shape, scene_c)
    good = ~table.bad_pixels.flags
    rnus, times = [], []
    for k, t in enumerate(grid):
        frame = simulate_raw(scene, model, t, first_index + k, noise_seed)
        t0 = time.perf_counter()
        corrected = apply_nuc(frame, table)
        times.append((time.perf_counter() - t0) * 1e3)
        rnus.append(rnu_percent(corrected.samples, good))
    return rnus, times


def sweep_calibration_temperature(
    model: NoiseModel,
    setpoints: CalibrationSetpoints,
    ambients: Sequence[float],
    eval_grid: Sequence[float] = DEFAULT_EVAL_GRID,
    repeats: int = 1,
    mode: str | None = None,
    frames_per_ref: int = 32,
    eval_scene_c: float = 25.0,
    master_seed: int = 0,
) -> SweepReport:
    """Recalibrate at each ambient temperature and score flat fields across
    the operating grid: mean and worst-case RNU per calibration ambient."""
    ambients = [float(a) for a in ambients]
    if not ambients:
        raise ValueError("ambient list must not be empty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    mode = mode or setpoints.mode
    seeds = repeat_seeds(master_seed, repeats)
    grid = [float(t) for t in eval_grid]

    def run_row(ambient: float) -> SweepRow:
        sp = setpoints_for_ambient(setpoints, ambient, mode)
        means, worsts, per_grid, timing = [], [], [], []
        for seed in seeds:
            table = calibrate_from_model(model, sp, frames_per_ref, seed)
            rnus, times = evaluate_rnu_grid(table, model, grid, eval_scene_c, seed)
            means.append(float(np.mean(rnus)))
            worsts.append(float(np.max(rnus)))
            per_grid.append(rnus)
            timing.append(TimingReport.from_records([{"nuc": t} for t in times], times))
        w_mean, w_std = _mean_std(worsts)
        extra = {"ambient_c": ambient, "rnu_worst_mean": w_mean, "rnu_worst_std": w_std}
        grid_mean = np.mean(per_grid, axis=0)
        for t, v in zip(grid, grid_mean):
            extra[f"rnu_at_{t:g}C"] = float(v)
        return SweepRow(
            descriptor=f"{mode}@{ambient:g}C",
            flags={n: False for n in FLAG_ORDER},
            tonemap="",
            metrics={"rnu": _mean_std(means), "psnr": (math.nan, math.nan), "cni": (math.nan, math.nan)},
            timing=_merge_timing(timing),
            extra=extra,
        )

    return SweepReport("temperature", _map_rows(run_row, ambients), repeats)
