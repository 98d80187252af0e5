"""Command-line entry point.

Exit status: 0 on success, 1 for runtime or domain failures (degenerate
geometry, unconverged solve, too many calibration failures), 2 for usage and
configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera_geom import second_pose
from .config import load_config
from .errors import ConfigError, DegenerateGeometryError, DtmnavError
from .ins import euler_from_dcm
from .pose_solver import unpack_params
from .sim import (
    ScenarioConfig,
    calibrate_r,
    episode_summary,
    monte_carlo,
    run_episode,
    solve_trial,
    synth_terrain,
    write_episode_csv,
    write_matrix_csv,
    write_mc_csv,
    write_vision_csv,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("config", nargs="?", help="scenario config file (TOML key = value); defaults if omitted")
    p.add_argument("-o", "--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--conventional-bias-coupling", action="store_true",
                   help="couple accel bias into velocity and gyro bias into attitude")
    p.add_argument("--robust-huber", type=float, metavar="T", help="Huber threshold for the solver")
    p.add_argument("--frozen-ge", action="store_true", help="freeze terrain contacts at the initial guess")
    p.add_argument("--noise", type=float, metavar="SIGMA", help="pixel noise sigma (normalized units)")
    p.add_argument("--features", type=int, metavar="N", help="features per vision fix")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtmnav", description="DTM-aided vision / INS navigation experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run one closed-loop episode and write CSV")
    _common(p)

    p = sub.add_parser("solve", help="run one pose / ego-motion solve and report errors")
    _common(p, out_required=False)
    p.add_argument("--perturb", type=float, default=1.0, metavar="SCALE",
                   help="scale on the configured initial-guess perturbation (0 = start at truth)")
    p.set_defaults(features_default=7, noise_default=0.0)

    p = sub.add_parser("calibrate-r", help="estimate the 6x6 vision measurement covariance")
    _common(p)
    p.add_argument("--runs", type=int, default=100, help="number of solves (at least 30)")

    p = sub.add_parser("mc", help="Monte-Carlo episodes with per-time RMS output")
    _common(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    return parser


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    solver = cfg.solver
    if args.robust_huber is not None:
        if not args.robust_huber > 0:
            raise ConfigError("--robust-huber must be positive")
        solver = replace(solver, huber_threshold=args.robust_huber)
    if args.frozen_ge:
        solver = replace(solver, frozen_ge=True)
    changes = {"solver": solver}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.conventional_bias_coupling:
        changes["filter"] = replace(cfg.filter, conventional_bias_coupling=True)
    if args.noise is not None and args.command != "solve":
        changes["pixel_noise_sigma"] = args.noise
    if args.features is not None and args.command != "solve":
        changes["n_features"] = args.features
    try:
        return replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_simulate(cfg, args) -> int:
    out = _out_dir(args)
    rec = run_episode(cfg)
    write_episode_csv(rec, out / "episode.csv")
    write_vision_csv(rec, out / "vision.csv")
    text = episode_summary(rec)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _vec(v) -> str:
    return "[" + ", ".join(f"{x: .9g}" for x in v) + "]"


def _cmd_solve(cfg, args) -> int:
    n = args.features if args.features is not None else args.features_default
    sigma = args.noise if args.noise is not None else args.noise_default
    if n < 1:
        raise ConfigError("--features must be positive")
    grid = synth_terrain(cfg.terrain)
    rng = np.random.default_rng(cfg.seed)
    lines = [f"features = {n}", f"pixel_noise_sigma = {sigma!r}", f"epoch_s = {cfg.solve_time!r}"]
    try:
        est, truth, x0, cam2 = solve_trial(cfg, grid, cfg.solve_time, rng, n, sigma, args.perturb)
    except DegenerateGeometryError as exc:
        lines += [f"degenerate geometry: Jacobian rank {exc.rank} < 12",
                  "singular values: " + _vec(exc.singular_values)]
        _report(lines, args)
        return EXIT_RUNTIME
    x = est.params
    pos_err = np.abs(x[0:3] - truth[0:3])
    att_err = np.abs(euler_from_dcm(est.pose1.R @ unpack_params(truth)[0].R.T))
    p2_err = np.abs(second_pose(est.pose1, est.motion).p - cam2.p)
    lines += [
        "initial  = " + _vec(x0),
        "estimate = " + _vec(x),
        "truth    = " + _vec(truth),
        "p1_error_m = " + _vec(pos_err),
        "R1_error_rad = " + _vec(att_err),
        "p2_error_m = " + _vec(p2_err),
        f"iterations = {est.iterations}",
        f"converged = {est.converged}",
        f"switched_to_lm = {est.switched_to_lm}",
        f"residual_norm = {est.final_residual_norm!r}",
        f"rank = {est.jacobian_rank}",
        f"condition_number = {est.condition_number!r}",
    ]
    _report(lines, args)
    return EXIT_OK if est.converged else EXIT_RUNTIME


def _report(lines, args):
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = _out_dir(args)
    if out is not None:
        (out / "solve.txt").write_text(text)


def _cmd_calibrate(cfg, args) -> int:
    if args.runs < 30:
        raise ConfigError("calibrate-r needs --runs >= 30")
    out = _out_dir(args)
    try:
        cal = calibrate_r(cfg, args.runs)
    except DtmnavError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_matrix_csv(cal.covariance, out / "r_matrix.csv")
    print(f"runs = {cal.n_runs}\nfailed = {cal.n_failed}")
    print("std = " + _vec(np.sqrt(np.diag(cal.covariance))))
    print(f"wrote {out / 'r_matrix.csv'}")
    return EXIT_OK


def _cmd_mc(cfg, args) -> int:
    if args.runs < 1 or args.workers < 1:
        raise ConfigError("--runs and --workers must be positive")
    out = _out_dir(args)
    mc = monte_carlo(cfg, args.runs, args.workers)
    write_mc_csv(mc, out / "mc.csv")
    for i, rec in enumerate(mc.episodes):
        write_vision_csv(rec, out / f"vision_{i:03d}.csv")
    late = mc.t >= 0.2 * mc.t[-1]
    text = "\n".join([
        f"runs = {args.runs}",
        f"base_seed = {cfg.seed}",
        f"drift_final_position_rms_m = {float(mc.drift_rms[-1])!r}",
        f"corrected_final_position_rms_m = {float(mc.corrected_rms[-1])!r}",
        f"corrected_max_position_rms_after_20pct_m = {float(mc.corrected_rms[late].max())!r}",
        f"drift_final_velocity_rms_mps = {float(mc.drift_vel_rms[-1])!r}",
        f"corrected_final_velocity_rms_mps = {float(mc.corrected_vel_rms[-1])!r}",
        f"solver_convergence_rate = {mc.convergence_rate!r}",
    ]) + "\n"
    (out / "summary.txt").write_text(text)
    write_matrix_csv(mc.measurement_covariance, out / "measurement_covariance.csv")
    print(text, end="")
    return EXIT_OK


_COMMANDS = {"simulate": _cmd_simulate, "solve": _cmd_solve, "calibrate-r": _cmd_calibrate, "mc": _cmd_mc}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ScenarioConfig()
        cfg = _apply_overrides(cfg, args)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DtmnavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
