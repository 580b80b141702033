"""Command-line entry point: ``irpipe {calibrate,correct,simulate,sweep,bench}``.

Exit codes: 0 success, 2 usage or configuration error, 3 domain error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from irpipe import config as cfgmod
from irpipe.errors import ConfigInvalid, IrPipeError
from irpipe.frames import FrameStack, load_frames, save_frames
from irpipe.nuc import (
    CalibrationSetpoints,
    calibrate_shutter,
    calibrate_shutterless,
    load_table,
    save_table,
)
from irpipe.pipeline import (
    DEFAULT_EVAL_GRID,
    STAGE_ORDER,
    Pipeline,
    SimulatedSequence,
    calibrate_from_model,
    run_pipeline,
    sweep_calibration_temperature,
    sweep_stage_powerset,
    sweep_tonemap,
)
from irpipe.report import write_report
from irpipe.simulator import build_noise_model, simulate_stack
from irpipe.tonemap import ALGORITHMS

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN = 0, 2, 3
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


def _frame_format(path: str) -> str:
    return "container" if Path(path).suffix.lower() == ".tir" else "pgm16"


def _load(path: str) -> FrameStack:
    return load_frames(path, _frame_format(path))


_SETPOINT_KEYS = {
    "cold": "t_scene_cold_c",
    "hot": "t_scene_hot_c",
    "amb1": "t_amb_1_c",
    "amb2": "t_amb_2_c",
    "scene3": "t_scene_3_c",
}


def parse_setpoints(text: str) -> dict[str, float]:
    """``cold=10,hot=40,amb1=25[,amb2=35,scene3=10]`` -> setpoint kwargs."""
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in _SETPOINT_KEYS:
            raise UsageError(f"bad setpoint item {part!r}; keys are {', '.join(_SETPOINT_KEYS)}")
        try:
            out[_SETPOINT_KEYS[key]] = float(value)
        except ValueError:
            raise UsageError(f"setpoint {key!r} is not a number: {value!r}") from None
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    sp_kw = parse_setpoints(args.setpoints)
    if args.mode == "shutterless":
        if args.ref2 is None:
            raise UsageError("shutterless calibration requires --ref2")
        sp_kw.setdefault("t_amb_1_c", 30.0)
        sp_kw.setdefault("t_amb_2_c", 35.0)
        sp_kw.setdefault("t_scene_3_c", sp_kw.get("t_scene_cold_c", 10.0))
    elif "t_amb_2_c" in sp_kw or "t_scene_3_c" in sp_kw or args.ref2 is not None:
        raise UsageError("amb2/scene3/--ref2 only apply to shutterless mode")
    setpoints = CalibrationSetpoints(**sp_kw)
    cold, hot = _load(args.cold), _load(args.hot)
    if args.mode == "shutter":
        table = calibrate_shutter(cold, hot, setpoints)
    else:
        table = calibrate_shutterless(cold, hot, _load(args.ref2), setpoints)
    save_table(table, args.out)
    good = ~table.bad_pixels.flags
    g = table.gain[good]
    print(f"mode: {table.mode}")
    print(f"bad pixels: {table.bad_pixels.count} ({100 * table.bad_pixels.fraction:.3f}%)")
    print(f"gain: mean {g.mean():.6f} std {g.std():.6f} min {g.min():.6f} max {g.max():.6f}")
    print(f"targets: cold {table.target_cold:.3f} hot {table.target_hot:.3f}")
    return EXIT_OK


def _timing_rows(writer, index: int, timings: dict, total: float) -> None:
    writer.writerow([index] + [f"{timings[s]:.4f}" if s in timings else "" for s in STAGE_ORDER] + [f"{total:.4f}"])


def cmd_correct(args) -> int:
    cfg = cfgmod.load_config(args.config)
    table = load_table(args.table)
    config = cfgmod.pipeline_config(cfg, table)
    stack = _load(getattr(args, "in"))
    pipe = Pipeline(config, config.resolved_table())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["frame"] + [f"{s}_ms" for s in STAGE_ORDER] + ["total_ms"])
    displays = []
    for i, frame in enumerate(stack.frames):
        display, _, timings, total = pipe.process(frame)
        displays.append(display.to_raw())
        _timing_rows(writer, i, timings, total)
    display_stack = FrameStack(tuple(displays), source_tag="display")
    if args.emit == "tir":
        save_frames(display_stack, out_dir / "corrected.tir", "container")
    else:
        save_frames(display_stack, out_dir / "frame.pgm", "pgm8")
    return EXIT_OK


def _model_from(cfg: dict, seed_override: int | None):
    seed, params = cfgmod.noise_params(cfg)
    if seed_override is not None:
        seed = seed_override
    return build_noise_model(seed, params), seed


def cmd_simulate(args) -> int:
    cfg = cfgmod.load_config(args.scenario)
    model, seed = _model_from(cfg, args.seed)
    fpa = float(cfg.get("simulator", {}).get("fpa_temp_c", 25.0))
    scenes = cfgmod.scenes(cfg, model.params, args.frames, seed)
    stack = simulate_stack(scenes, model, fpa, tag=str(args.scenario))
    save_frames(stack, args.out, "container")
    print(f"wrote {len(stack)} frames {model.width}x{model.height} (seed {seed}) to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = cfgmod.load_config(args.config)
    model, seed = _model_from(cfg, args.seed)
    sw = cfg.get("sweep", {})
    mode = cfg.get("pipeline", {}).get("mode", "shutter")
    setpoints = cfgmod.setpoints(cfg, mode)
    master_seed = int(sw.get("master_seed", seed))
    frames_per_ref = int(sw.get("frames_per_ref", 32))

    if args.kind == "temperature":
        ambients = sw.get("ambients", [float(t) for t in range(10, 51, 5)])
        report = sweep_calibration_temperature(
            model,
            setpoints,
            ambients,
            eval_grid=sw.get("eval_grid", DEFAULT_EVAL_GRID),
            repeats=args.repeats,
            mode=mode,
            frames_per_ref=frames_per_ref,
            eval_scene_c=float(sw.get("eval_scene_c", 25.0)),
            master_seed=master_seed,
        )
    else:
        table = calibrate_from_model(model, setpoints, frames_per_ref, master_seed)
        config = cfgmod.pipeline_config(cfg, table)
        fpa = float(cfg.get("simulator", {}).get("fpa_temp_c", setpoints.t_amb_1_c))
        frames = int(sw.get("frames", 8))
        source = SimulatedSequence(model, tuple(cfgmod.scenes(cfg, model.params, frames, seed)), fpa)
        if args.kind == "powerset":
            report = sweep_stage_powerset(config, source, repeats=args.repeats, master_seed=master_seed)
        else:
            algorithms = sw.get("algorithms", list(ALGORITHMS))
            report = sweep_tonemap(config, source, algorithms, args.repeats, master_seed=master_seed)

    write_report(report, args.out, "csv")
    if args.svg:
        write_report(report, args.svg, "svg")
    print(f"{args.kind} sweep: {len(report.rows)} rows x {report.repeats} repeat(s) -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = cfgmod.load_config(args.config)
    table = load_table(args.table)
    config = cfgmod.pipeline_config(cfg, table)
    stack = _load(getattr(args, "in"))
    n = args.frames
    frames = [stack.frames[i % len(stack)] for i in range(n)]
    result = run_pipeline(config, FrameStack(tuple(frames)), table=config.resolved_table())
    t = result.timing
    print(f"host: {t.host}")
    print(f"frames: {t.frames}  config: {config.mode}/{config.descriptor}  tonemap: {config.tonemap.algorithm}")
    print(f"{'stage':<10}{'mean_ms':>10}{'min_ms':>10}{'max_ms':>10}")
    for name, st in t.stages.items():
        print(f"{name:<10}{st.mean_ms:>10.3f}{st.min_ms:>10.3f}{st.max_ms:>10.3f}")
    print(f"{'total':<10}{t.total.mean_ms:>10.3f}{t.total.min_ms:>10.3f}{t.total.max_ms:>10.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irpipe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="estimate a NUC table from reference stacks")
    p.add_argument("--mode", choices=["shutter", "shutterless"], required=True)
    p.add_argument("--cold", required=True, help="cold-scene stack (.tir or PGM)")
    p.add_argument("--hot", required=True, help="hot-scene stack (.tir or PGM)")
    p.add_argument("--ref2", help="third reference at the second ambient (shutterless)")
    p.add_argument(
        "--setpoints",
        default="cold=10,hot=40,amb1=25",
        help="comma list of cold,hot,amb1[,amb2,scene3] in degC (default: %(default)s)",
    )
    p.add_argument("--out", required=True, help="output .cal file")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("correct", help="run the correction pipeline on a stack")
    p.add_argument("--table", required=True, help=".cal calibration table")
    p.add_argument("--config", required=True, help="pipeline config file")
    p.add_argument("--in", required=True, help="input .tir or PGM (file or directory)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--emit", choices=["pgm8", "tir"], default="pgm8",
                   help="pgm8: one file per frame; tir: one container with bit_depth 8")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("simulate", help="render a raw .tir stack from a scenario")
    p.add_argument("--scenario", required=True, help="config file with a [simulator] section")
    p.add_argument("--frames", type=_positive_int, required=True)
    p.add_argument("--out", required=True, help="output .tir file")
    p.add_argument("--seed", type=int, default=None,
                   help=f"override the scenario seed (scenario default, else {DEFAULT_SEED})")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a power-set, temperature or tonemap sweep")
    p.add_argument("--kind", choices=["powerset", "temperature", "tonemap"], required=True)
    p.add_argument("--config", required=True, help="config with [simulator], [pipeline], [sweep]")
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--svg", help="optional SVG chart")
    p.add_argument("--seed", type=int, default=None, help="override the simulator seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-stage timing on a stack")
    p.add_argument("--table", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--in", required=True, help="input .tir")
    p.add_argument("--frames", type=_positive_int, default=100,
                   help="frames to process, cycling the input (default: %(default)s)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigInvalid) as exc:
        print(f"irpipe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IrPipeError as exc:
        print(f"irpipe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, ValueError) as exc:
        print(f"irpipe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
