"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines
interleaved with pytest's own output; they are printed either way).
"""

import gc
import time

import numpy as np
import pytest

from irpipe.errors import MalformedHeader, TruncatedPayload
from irpipe.frames import FrameStack, RawFrame, frame_stats, load_frames, save_frames
from irpipe.nuc import (
    BadPixelMap,
    CalibrationSetpoints,
    CalibrationTable,
    apply_nuc,
    calibrate_shutter,
    load_table,
    save_table,
)
from irpipe.pipeline import (
    DEFAULT_EVAL_GRID,
    PipelineConfig,
    SimulatedSequence,
    StageParams,
    calibrate_from_model,
    evaluate_rnu_grid,
    sweep_stage_powerset,
)
from irpipe.report import BASE_HEADER, report_csv
from irpipe.simulator import NoiseParams, Scene, build_noise_model, generate_calibration_set, render_clean, simulate_raw
from irpipe.stages import (
    SpatialDenoiseParams,
    TdnState,
    TemporalDenoiseParams,
    destripe,
    replace_bad_pixels,
    temporal_denoise,
)
from irpipe.tonemap import ALGORITHMS, TonemapSpec, tonemap

from oracles import bpr_value

PUBLISHED_HEADER = (
    "config,destrip,bpr,sdn,tdn,flare,tonemap,rnu_mean,rnu_std,psnr_mean,psnr_std,cni_mean,cni_std,time_total_ms"
)


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, checks: dict[str, bool], detail: str = ""):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f" [{detail}]"
        if failed:
            line += f" failed: {', '.join(failed)}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def test_criterion_01_two_point_exactness(verdict):
    t0 = time.perf_counter()
    h, w = 480, 640
    ideal = build_noise_model(1, NoiseParams.ideal(width=w, height=h))
    cold, hot, _ = generate_calibration_set(ideal, CalibrationSetpoints(), 4)
    table = calibrate_shutter(cold, hot)
    gain_ok = bool(np.all(np.abs(table.gain - 1.0) <= 1e-9))
    offset_ok = bool(np.all(np.abs(table.offset) <= 1e-6))

    def reproduces(tbl, stacks):
        good = ~tbl.bad_pixels.flags
        for stack, target in zip(stacks, (tbl.target_cold, tbl.target_hot)):
            for frame in stack.frames:
                out = apply_nuc(frame, tbl).samples.astype(np.float64)
                if np.max(np.abs(out[good] - target)) > 1.0:
                    return False
        return True

    ideal_targets = reproduces(table, (cold, hot))
    # non-trivial fixed pattern, no temporal noise: references must still map to their targets
    fpn = build_noise_model(2, NoiseParams(width=w, height=h, temporal_sigma=0.0))
    c2, h2, _ = generate_calibration_set(fpn, CalibrationSetpoints(), 2)
    t2 = calibrate_shutter(c2, h2)
    fpn_targets = reproduces(t2, (c2, h2))
    elapsed = time.perf_counter() - t0
    verdict(
        1,
        "two-point NUC exactness at 640x480",
        {
            "gain 1 +- 1e-9": gain_ok,
            "offset 0 +- 1e-6": offset_ok,
            "ideal references hit targets": ideal_targets,
            "fixed-pattern references hit targets": fpn_targets,
            "runtime < 5 s": elapsed < 5.0,
        },
        f"{elapsed:.2f} s, {t2.bad_pixels.count} bad pixels",
    )


def test_criterion_02_shutterless_robustness(verdict):
    t0 = time.perf_counter()
    model = build_noise_model(0)
    grid = DEFAULT_EVAL_GRID
    shutter = calibrate_from_model(model, CalibrationSetpoints(25.0, 10.0, 40.0), 32, noise_seed=1)
    shutterless = calibrate_from_model(model, CalibrationSetpoints.shutterless(30.0, 35.0, 10.0), 32, noise_seed=1)
    rnu_sh, _ = evaluate_rnu_grid(shutter, model, grid, noise_seed=2)
    rnu_sl, _ = evaluate_rnu_grid(shutterless, model, grid, noise_seed=2)
    worst_sl = max(rnu_sl)
    dist = [abs(t - 25.0) for t in grid]
    increasing = all(
        rnu_sh[i] < rnu_sh[j] for i in range(len(grid)) for j in range(len(grid)) if dist[i] < dist[j]
    )
    at45 = rnu_sh[list(grid).index(45.0)]
    elapsed = time.perf_counter() - t0
    verdict(
        2,
        "shutterless robustness over 10-50 degC",
        {
            "shutterless worst RNU < 1%": worst_sl < 1.0,
            "shutter RNU strictly increasing in |T-25|": increasing,
            "shutter RNU at 45 > 2x shutterless worst": at45 > 2 * worst_sl,
            "runtime < 60 s": elapsed < 60.0,
        },
        f"shutterless worst {worst_sl:.3f}%, shutter at 45 {at45:.3f}%, {elapsed:.1f} s",
    )


def test_criterion_03_std3_equivalence(verdict):
    rng = np.random.default_rng(303)
    mismatches = 0
    for _ in range(50):
        h, w = rng.integers(16, 96, 2)
        vals = np.clip(np.round(rng.normal(rng.uniform(2000, 12000), rng.uniform(5, 2000), (h, w))), 0, 16383)
        frame = RawFrame(vals.astype(np.uint16))
        st = frame_stats(frame)
        a = tonemap(frame, TonemapSpec(algorithm="std3")).samples
        spec = TonemapSpec(algorithm="minmax", lo=st.mean - 3 * st.std, hi=st.mean + 3 * st.std)
        b = tonemap(frame, spec).samples
        mismatches += int(not np.array_equal(a, b))
    verdict(3, "std3 == minmax(mean -+ 3 std) on 50 frames", {"bit-identical": mismatches == 0},
            f"{mismatches} mismatching frames")


def test_criterion_04_destriping_oracle(verdict):
    h, w = 120, 160
    params = NoiseParams.ideal(width=w, height=h, sigma_stripe=20.0)
    model = build_noise_model(4, params)
    scene = Scene.flat(h, w, 40.0)
    striped = simulate_raw(scene, model, 25.0)
    clean = np.full((h, w), 4000.0)  # ideal gain 1, flux 100/degC
    half = 9 // 2
    out = destripe(striped).samples.astype(np.float64)
    stripe_err = float(np.max(np.abs(out - clean)[:, half : w - half]))
    # the constant level is unobservable from one frame; also report the error after removing it
    centred = out - out[:, half : w - half].mean()
    centred_err = float(np.max(np.abs(centred[:, half : w - half] - 0.0)))

    ramp = np.tile(np.round(np.linspace(1000, 15000, w)), (h, 1))
    ramp_out = destripe(RawFrame(ramp.astype(np.uint16))).samples.astype(np.float64)
    ramp_err = float(np.max(np.abs(ramp_out - ramp)[:, half : w - half]))
    verdict(
        4,
        "destriping oracle (interior columns)",
        {"stripe-only restored within 1 LSB": stripe_err <= 1.0, "ramp altered <= 1 LSB": ramp_err <= 1.0},
        f"stripe max err {stripe_err:.0f} LSB (mean-removed {centred_err:.0f}), ramp max err {ramp_err:.0f} LSB",
    )


def test_criterion_05_bpr_oracle(verdict):
    rng = np.random.default_rng(505)
    h, w = 16, 20
    corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
    wrong_fill = wrong_keep = 0
    for trial in range(1000):
        samples = rng.integers(0, 16384, (h, w)).astype(np.uint16)
        flags = np.zeros((h, w), bool)
        n = int(rng.integers(1, 12))
        flags.flat[rng.choice(h * w, n, replace=False)] = True
        kind = trial % 4
        if kind == 0:
            flags[corners[trial // 4 % 4]] = True
        elif kind == 1:
            r = int(rng.integers(0, h))
            flags[r, 0] = flags[r, w - 1] = True
        elif kind == 2:
            r, c = int(rng.integers(0, h)), int(rng.integers(0, w - 1))
            flags[r, c] = flags[r, c + 1] = True
        else:
            r, c = int(rng.integers(0, h - 1)), int(rng.integers(0, w))
            flags[r, c] = flags[r + 1, c] = True
        out = replace_bad_pixels(RawFrame(samples), BadPixelMap(flags)).samples
        for r, c in zip(*np.nonzero(flags)):
            expected = bpr_value(samples, flags, r, c)
            if expected is not None and out[r, c] != expected:
                wrong_fill += 1
        wrong_keep += int(not np.array_equal(out[~flags], samples[~flags]))
    verdict(
        5,
        "BPR equals brute-force 5x5 weighted mean over 1000 placements",
        {"replacements exact": wrong_fill == 0, "good pixels bit-exact": wrong_keep == 0},
        f"{wrong_fill} wrong replacements, {wrong_keep} trials touching good pixels",
    )


def test_criterion_06_temporal_denoise(verdict):
    sigma = 16.0
    model = build_noise_model(6, NoiseParams.ideal(width=128, height=96, temporal_sigma=sigma))
    scene = Scene.flat(96, 128, 40.0)
    clean = render_clean(scene, model, 25.0).samples.astype(np.float64)
    state = TdnState(TemporalDenoiseParams(blend_alpha=0.5))
    for i in range(10):
        out, state = temporal_denoise(state, simulate_raw(scene, model, 25.0, i))
    resid = float(np.std(out.samples.astype(np.float64) - clean))

    ideal = build_noise_model(7, NoiseParams.ideal(width=160, height=128))
    textured = Scene.targets(128, 160, 20.0, seed=8)
    _, s = temporal_denoise(TdnState(), simulate_raw(textured, ideal, 25.0))
    _, s = temporal_denoise(s, simulate_raw(textured.shifted(8, 0), ideal, 25.0))
    inner = s.last_vectors[1:-1, 1:-1].reshape(-1, 2)
    all_8_0 = bool(np.all(inner == (8, 0)))

    frame = RawFrame(np.random.default_rng(9).integers(0, 16384, (64, 64)).astype(np.uint16))
    _, s2 = temporal_denoise(TdnState(), frame)
    again, _ = temporal_denoise(s2, frame)
    verdict(
        6,
        "temporal denoise noise reduction, motion and pass-through",
        {
            "last-frame std <= 0.7 sigma": resid <= 0.7 * sigma,
            "interior blocks match (8, 0)": all_8_0,
            "identical frames pass through": again == frame,
        },
        f"std {resid:.2f} = {resid / sigma:.2f} sigma, {len(inner)} interior blocks",
    )


def test_criterion_07_tonemap_invariants(verdict):
    constant = RawFrame(np.full((64, 64), 7777, dtype=np.uint16))
    const_ok = all(np.all(tonemap(constant, TonemapSpec(algorithm=a)).samples == 128) for a in ALGORITHMS)

    ramp = RawFrame(np.arange(1 << 14, dtype=np.uint16).reshape(128, 128))
    non_monotone = [
        a
        for a in ALGORITHMS
        if a != "clahe" and np.any(np.diff(tonemap(ramp, TonemapSpec(algorithm=a)).samples.ravel().astype(int)) < 0)
    ]

    rng = np.random.default_rng(707)
    worst_ks = 0.0
    dyn_equal = True
    for _ in range(10):
        vals = np.clip(np.round(rng.normal(8000, rng.uniform(300, 3000), (128, 128))), 0, 16383)
        frame = RawFrame(vals.astype(np.uint16))
        eq = tonemap(frame, TonemapSpec(algorithm="equalized")).samples
        ecdf = np.cumsum(np.bincount(eq.ravel(), minlength=256)) / eq.size
        worst_ks = max(worst_ks, float(np.max(np.abs(ecdf - np.arange(1, 257) / 256.0))))
        dyn = tonemap(frame, TonemapSpec(algorithm="dynamic", plateau=1.0)).samples
        dyn_equal &= bool(np.array_equal(dyn, eq))
    verdict(
        7,
        "tonemap invariants",
        {
            "constant -> 128 for all nine": const_ok,
            "global maps monotone on 14-bit ramp": not non_monotone,
            "equalized KS <= 0.05": worst_ks <= 0.05,
            "dynamic(p=1) == equalized": dyn_equal,
        },
        f"max KS {worst_ks:.4f}",
    )


def _fast_params():
    return StageParams(sdn=SpatialDenoiseParams(sigma_spatial=1.0), tdn=TemporalDenoiseParams(search_radius=2))


def test_criterion_08_harness_structure(verdict):
    model = build_noise_model(8, NoiseParams(width=48, height=32))
    scenes = tuple(Scene.targets(32, 48, seed=1).shifted(i, 0) for i in range(3))
    seq = SimulatedSequence(model, scenes, 25.0)
    sh_table = calibrate_from_model(model, CalibrationSetpoints(), 8, noise_seed=1)
    sl_table = calibrate_from_model(model, CalibrationSetpoints.shutterless(30.0, 35.0, 10.0), 8, noise_seed=1)
    sh_base = PipelineConfig("shutter", sh_table, params=_fast_params())
    sl_base = PipelineConfig("shutterless", sl_table, params=_fast_params())
    a = sweep_stage_powerset(sh_base, seq, repeats=5, master_seed=42)
    b = sweep_stage_powerset(sh_base, seq, repeats=5, master_seed=42)
    c = sweep_stage_powerset(sl_base, seq, repeats=2, master_seed=42)
    expected_order = []
    for i in range(16):
        on = [n for k, n in enumerate(("destrip", "bpr", "sdn", "tdn")) if (i >> k) & 1]
        expected_order.append("+".join(on) or "baseline")
    header = report_csv(a).splitlines()[0]
    per_stage = ",".join(f"time_{s}_ms" for s in ("nuc", "bpr", "destrip", "sdn", "tdn", "flare", "tonemap"))
    verdict(
        8,
        "power-set harness structure",
        {
            "16 shutter rows": len(a) == 16,
            "32 shutterless rows": len(c) == 32,
            "binary-counting order": [r.descriptor for r in a.rows] == expected_order,
            "bit-identical metrics on rerun": [r.metrics for r in a.rows] == [r.metrics for r in b.rows],
            "baseline marked": a.rows[0].baseline and sum(r.baseline for r in a.rows) == 1,
            "CSV header": header == PUBLISHED_HEADER + "," + per_stage and header.split(",") == BASE_HEADER,
        },
    )


def test_criterion_09_timing_accounting(verdict):
    model = build_noise_model(9, NoiseParams(width=160, height=120))
    n_frames = 100
    scenes = tuple(Scene.targets(120, 160, seed=2).shifted(i % 7, 0) for i in range(n_frames))
    seq = SimulatedSequence(model, scenes, 30.0)
    table = calibrate_from_model(model, CalibrationSetpoints.shutterless(30.0, 35.0, 10.0), 8, noise_seed=1)
    base = PipelineConfig("shutterless", table, params=_fast_params())
    # warm caches over every row so the first (baseline) row is not penalised,
    # and keep the collector out of the timed region
    sweep_stage_powerset(base, lambda s: _head(seq(s), 20), repeats=1)
    gc.collect()
    gc.disable()
    try:
        report = sweep_stage_powerset(base, seq, repeats=2, master_seed=3)
    finally:
        gc.enable()
    baseline = report.rows[0].timing.total.mean_ms
    slower = [r.descriptor for r in report.rows[1:] if r.timing.total.mean_ms < baseline]
    closest = min(report.rows[1:], key=lambda r: r.timing.total.mean_ms)
    every_row_timed = all(r.timing.frames == 2 * n_frames and "nuc" in r.timing.stages for r in report.rows)
    consistent = all(r.timing.consistent() for r in report.rows)
    verdict(
        9,
        "per-stage timing and baseline dominance over 2 x 100 frames",
        {
            "timing report on every row": every_row_timed,
            "total >= stage sum - 5%": consistent,
            "every augmented row >= baseline": not slower,
        },
        f"baseline {baseline:.3f} ms/frame, cheapest augmented {closest.descriptor} "
        f"{closest.timing.total.mean_ms:.3f} ms/frame" + (f", faster rows: {slower}" if slower else ""),
    )


def _head(pair, n):
    raw, clean = pair
    return FrameStack(raw.frames[:n]), FrameStack(clean.frames[:n])


def test_criterion_10_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(1010)
    tir_bad = cal_bad = 0
    for i in range(100):
        h, w = (int(v) for v in rng.integers(16, 48, 2))
        depth = int(rng.integers(8, 17))
        n = int(rng.integers(1, 4))
        frames = tuple(
            RawFrame(
                rng.integers(0, 1 << depth, (h, w)).astype(np.uint16),
                fpa_temp_c=round(float(rng.uniform(-40, 120)), 3),
                bit_depth=depth,
            )
            for _ in range(n)
        )
        path = tmp_path / f"s{i}.tir"
        save_frames(FrameStack(frames), path)
        back = load_frames(path)
        same = len(back) == n and all(
            a.bit_depth == b.bit_depth and a.fpa_temp_c == b.fpa_temp_c and np.array_equal(a.samples, b.samples)
            for a, b in zip(frames, back.frames)
        )
        tir_bad += int(not same)

        mode = "shutterless" if i % 2 else "shutter"
        table = CalibrationTable(
            mode,
            rng.uniform(0.5, 2.0, (h, w)),
            rng.normal(0, 300, (h, w)),
            rng.normal(0, 10, (h, w)) if mode == "shutterless" else np.zeros((h, w)),
            round(float(rng.uniform(0, 50)), 3),
            float(rng.uniform(500, 2000)),
            float(rng.uniform(3000, 6000)),
            BadPixelMap(rng.random((h, w)) < 0.02),
        )
        cpath = tmp_path / f"t{i}.cal"
        save_table(table, cpath)
        back_t = load_table(cpath)
        cal_bad += int(not (back_t == table and cpath.read_bytes() == _resave(back_t, tmp_path)))

    def raises(fn, exc):
        try:
            fn()
        except exc:
            return True
        except Exception:
            return False
        return False

    tir = (tmp_path / "s0.tir").read_bytes()
    cal = (tmp_path / "t0.cal").read_bytes()
    corrupt = {}
    for name, data, loader in (("tir", tir, load_frames), ("cal", cal, load_table)):
        trunc = tmp_path / f"trunc.{name}"
        trunc.write_bytes(data[:-7])
        magic = tmp_path / f"magic.{name}"
        magic.write_bytes(b"XXXX" + data[4:])
        short = tmp_path / f"short.{name}"
        short.write_bytes(data[:10])
        corrupt[f"{name} truncated -> TruncatedPayload"] = raises(lambda p=trunc, f=loader: f(p), TruncatedPayload)
        corrupt[f"{name} bad magic -> MalformedHeader"] = raises(lambda p=magic, f=loader: f(p), MalformedHeader)
        corrupt[f"{name} short header -> MalformedHeader"] = raises(lambda p=short, f=loader: f(p), MalformedHeader)
    verdict(
        10,
        ".tir and .cal round trips over 100 fixtures plus corruption errors",
        {".tir bit-exact": tir_bad == 0, ".cal bit-exact": cal_bad == 0, **corrupt},
        f"{tir_bad} .tir and {cal_bad} .cal mismatches",
    )


def _resave(table, tmp_path):
    p = tmp_path / "resave.cal"
    save_table(table, p)
    return p.read_bytes()
