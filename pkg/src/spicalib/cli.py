"""Command-line entry point: ``spicalib <command> [options]``.

Exit codes: 0 ok, 2 configuration, 3 rendering, 4 solver/analysis, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io, twin
from .calibration import CalibrationResult, calibrate, calibrate_scene
from .errors import ConfigError, RenderError, SpiCalibError
from .measurement import fit_cube, fit_plane, fit_sphere, reconstruct
from .phase import recover_phase

EXIT_OK, EXIT_CONFIG, EXIT_RENDER, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4, 5

# acceptance thresholds reported by ``eval``
CUBE_RMSE_NOISELESS_MM = 0.1
RMSE_NOISY_MM = 1.0
DIAMETER_TOL = 0.005
SPHERE_DIAMETER_MM = 50.14
EVAL_LAMBDA = 0.3
EVAL_SHIFTS = 4


def _load_scene(path) -> twin.SceneConfig:
    return twin.SceneConfig.from_dict(io.read_json(path))


def _load_fringes(directory) -> np.ndarray:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    files = sorted(d.glob("fringe_*.pfm")) or sorted(d.glob("fringe.pfm"))
    if not files:
        raise FileNotFoundError(f"{d}: no fringe_NN.pfm or fringe.pfm files")
    return np.stack([io.read_pfm(f).astype(np.float64) for f in files])


def cmd_synth(args) -> int:
    scene = _load_scene(args.config)
    out = twin.render(scene, shifts=args.shifts)
    pm = twin.generate_pointmap(out, scene)
    names = twin.write_render(args.out, scene, out, pm)
    print(f"wrote {len(names)} files to {args.out} ({out.frames.shape[0]} frame(s))")
    return EXIT_OK


def cmd_dataset(args) -> int:
    ranges = twin.TableRanges.from_dict(io.read_json(args.ranges)) if args.ranges else twin.TableRanges()
    manifest = twin.generate_dataset(ranges, args.count, args.seed, args.out)
    print(f"rendered {manifest['count']} scene(s), {manifest['resamples']} resample(s)")
    return EXIT_OK


def _check_flag(name, given, actual):
    if given is not None and abs(given - actual) > 1e-9 * max(1.0, abs(actual)):
        raise ConfigError(f"--{name} {given} disagrees with the scene value {actual}")


def cmd_calibrate(args) -> int:
    if args.scene:
        if args.pointmap or args.mask or args.fringes:
            raise ConfigError("--scene excludes --pointmap/--mask/--fringes")
        scene = _load_scene(args.scene)
        _check_flag("cube-side", args.cube_side, scene.cube.side)
        _check_flag("period", args.period, scene.fringe.period_T)
        before = twin.render_events()
        result = calibrate_scene(scene, args.phase_source, args.shifts)
        events = twin.render_events() - before
        mode = "oracle" if args.phase_source == "analytic" else "oracle-substitute (phase shifting)"
    else:
        if not (args.pointmap and args.mask and args.fringes):
            raise ConfigError("file mode needs --pointmap, --mask and --fringes")
        if args.cube_side is None or args.period is None:
            raise ConfigError("file mode needs --cube-side and --period")
        coords = io.read_pfm(args.pointmap).astype(np.float64)
        mask = io.read_pgm_mask(args.mask)
        if coords.ndim != 3 or coords.shape[:2] != mask.shape:
            raise ConfigError("pointmap must be a colour PFM matching the mask size")
        maps = recover_phase(_load_fringes(args.fringes))
        result = calibrate(twin.Pointmap(coords, mask), maps.absolute, args.cube_side,
                           args.period, maps.modulation_mask, frames_used=maps.frames_used)
        events, mode = 0, "file"
    io.write_json(args.out, result.to_dict())
    print(f"calibrated ({mode}): reprojection RMSE {result.reprojection_rmse_px:.3e} px, "
          f"grating residual RMS {result.spdg_residual_rms:.3e}, {result.num_points} points, "
          f"frames used {result.frames_used}, render events {events}")
    return EXIT_OK


def cmd_measure(args) -> int:
    calib = CalibrationResult.from_dict(io.read_json(args.calib))
    phase = io.read_pfm(args.phase).astype(np.float64)
    mask = io.read_pgm_mask(args.mask)
    cloud = reconstruct(calib, phase, mask)
    io.write_ply(args.out, cloud.points)
    print(f"wrote {len(cloud)} points to {args.out} ({cloud.skipped} skipped)")
    return EXIT_OK


def cmd_phase(args) -> int:
    maps = recover_phase(_load_fringes(args.fringes))
    d = io.ensure_dir(args.out)
    io.write_pfm(d / "abs_phase.pfm", maps.absolute)
    io.write_pgm_mask(d / "phase_mask.pgm", maps.modulation_mask)
    print(f"recovered phase from {maps.frames_used} frames, {int(maps.modulation_mask.sum())} pixels")
    return EXIT_OK


def _fit(points, model, side=None, diameter=None):
    if model == "plane":
        return fit_plane(points)
    if model == "sphere":
        report = fit_sphere(points)
        d = 2.0 * report.params["radius_mm"]
        report.extra["diameter_mm"] = d
        if diameter is not None:
            report.extra["diameter_error"] = (d - diameter) / diameter
        return report
    if side is None:
        raise ConfigError("cube model needs --side")
    return fit_cube(points, side)


def cmd_fit(args) -> int:
    if args.side is not None and args.model != "cube":
        raise ConfigError("--side applies to the cube model only")
    if args.diameter is not None and args.model != "sphere":
        raise ConfigError("--diameter applies to the sphere model only")
    report = _fit(io.read_ply(args.cloud), args.model, args.side, args.diameter)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        io.write_json(args.out, report.to_dict())
    print(text)
    return EXIT_OK


def _measure_scene(calib, scene):
    out = twin.render(scene, shifts=EVAL_SHIFTS)
    maps = recover_phase(out.frames)
    return reconstruct(calib, maps.absolute, maps.modulation_mask)


def evaluate(seed: int = 0, lam: float = EVAL_LAMBDA) -> list[dict]:
    """Cube and sphere end-to-end runs on the mid-range scene."""
    base = twin.default_scene()
    calib = calibrate_scene(base)
    sphere = twin.SphereModel(tuple([base.cube.side / 2.0] * 3), SPHERE_DIAMETER_MM / 2.0)
    rows = []

    cloud = _measure_scene(calib, base.with_noise(0.0, seed))
    rep = fit_cube(cloud.points, base.cube.side)
    rows.append({"case": "cube", "lambda": 0.0, "points": len(cloud), "rmse_mm": rep.rmse_mm,
                 "limit": f"rmse < {CUBE_RMSE_NOISELESS_MM}",
                 "pass": rep.rmse_mm < CUBE_RMSE_NOISELESS_MM})

    cloud = _measure_scene(calib, base.with_noise(lam, seed))
    rep = fit_cube(cloud.points, base.cube.side)
    rows.append({"case": "cube", "lambda": lam, "points": len(cloud), "rmse_mm": rep.rmse_mm,
                 "limit": f"rmse < {RMSE_NOISY_MM}", "pass": rep.rmse_mm < RMSE_NOISY_MM})

    cloud = _measure_scene(calib, base.with_noise(lam, seed).with_sphere(sphere))
    rep = _fit(cloud.points, "sphere", diameter=SPHERE_DIAMETER_MM)
    err = rep.extra["diameter_error"]
    rows.append({"case": "sphere", "lambda": lam, "points": len(cloud), "rmse_mm": rep.rmse_mm,
                 "diameter_mm": rep.extra["diameter_mm"], "diameter_error": err,
                 "limit": f"rmse < {RMSE_NOISY_MM}, |diam err| < {DIAMETER_TOL:.1%}",
                 "pass": rep.rmse_mm < RMSE_NOISY_MM and abs(err) < DIAMETER_TOL})
    return rows


def format_table(rows) -> str:
    lines = [f"{'case':<7}{'lambda':>7}{'points':>8}{'rmse_mm':>10}{'diam_mm':>10}{'diam_err':>10}  "
             f"{'limit':<34}result"]
    for r in rows:
        diam = f"{r['diameter_mm']:.3f}" if "diameter_mm" in r else "-"
        derr = f"{r['diameter_error']:+.3%}" if "diameter_error" in r else "-"
        lines.append(f"{r['case']:<7}{r['lambda']:>7.2f}{r['points']:>8d}{r['rmse_mm']:>10.4f}"
                     f"{diam:>10}{derr:>10}  {r['limit']:<34}{'PASS' if r['pass'] else 'FAIL'}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    if not 0.0 <= args.lam <= 1.0:
        raise ConfigError("--lam must lie in [0, 1]")
    rows = evaluate(args.seed, args.lam)
    print(format_table(rows))
    if args.out:
        io.write_json(args.out, {"seed": args.seed, "rows": rows})
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spicalib", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render one scene")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--shifts", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dataset", help="render a random dataset")
    s.add_argument("--ranges")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("calibrate", help="solve camera and grating parameters")
    s.add_argument("--scene")
    s.add_argument("--pointmap")
    s.add_argument("--mask")
    s.add_argument("--fringes")
    s.add_argument("--cube-side", type=float)
    s.add_argument("--period", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--phase-source", choices=("analytic", "shift"), default="analytic",
                   help="oracle mode only; 'shift' is the phase-shifting substitute")
    s.add_argument("--shifts", type=int, default=EVAL_SHIFTS)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("measure", help="triangulate a phase map into a point cloud")
    s.add_argument("--calib", required=True)
    s.add_argument("--phase", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("phase", help="absolute phase from phase-shifted fringe frames")
    s.add_argument("--fringes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phase)

    s = sub.add_parser("fit", help="fit a reference shape to a point cloud")
    s.add_argument("--cloud", required=True)
    s.add_argument("--model", choices=("plane", "sphere", "cube"), required=True)
    s.add_argument("--side", type=float)
    s.add_argument("--diameter", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="end-to-end accuracy check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lam", type=float, default=EVAL_LAMBDA, help="noise level of the noisy rows")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except io.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RENDER
    except SpiCalibError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
