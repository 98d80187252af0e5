"""Synthetic scenarios and the closed INS / vision / EKF loop.

Ground truth is analytic: constant-speed flight made of straight and
constant-turn-rate segments over a synthesized (or loaded) DTM.  Two INS
copies integrate the same IMU stream; the drift copy is never corrected and
the corrected copy receives filter feedback after each vision fix.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .camera_geom import Pose, homogeneous, relative_motion, second_pose
from .dtm import TerrainGrid, load_ascii_grid
from .ekf import N_STATE, ErrorStateFilter, NoiseConfig, compose_measurement
from .errors import DtmnavError, ScenarioError
from .ins import (
    GRAVITY,
    BiasState,
    ImuSample,
    NavState,
    apply_corrections,
    dcm_b_to_l_batch,
    dcm_from_euler,
    euler_from_dcm,
    propagate,
    specific_force,
)
from .pose_solver import FlowField, SolverConfig, pack_params, solve

log = logging.getLogger(__name__)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TerrainSpec:
    kind: str = "rolling"  # flat | inclined | rolling | file
    slope: float = 0.1
    amplitude: float = 20.0
    wavelength: float = 100.0
    seed: int = 1
    cell_size: float = 10.0
    extent: tuple = (-600.0, 4600.0, -1200.0, 1200.0)  # xmin, xmax, ymin, ymax
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("flat", "inclined", "rolling", "file"):
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("terrain kind 'file' needs a path")
        if not self.cell_size > 0:
            raise ValueError("terrain cell_size must be positive")
        if self.kind == "rolling" and not self.wavelength > 0:
            raise ValueError("rolling terrain wavelength must be positive")
        x0, x1, y0, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise ValueError("terrain extent must be (xmin, xmax, ymin, ymax) with max > min")


@dataclass(frozen=True)
class TrajectorySpec:
    """Level flight at constant speed; ``segments`` are ``(duration, yaw_rate)``.

    Time not covered by the segments is flown straight.  An optional
    sinusoidal roll/pitch wobble exercises the attitude channels.
    """

    start: tuple = (0.0, 0.0, 100.0)
    heading: float = 0.0
    speed: float = 40.0
    climb_rate: float = 0.0
    segments: tuple = ((30.0, 0.0), (40.0, 0.01), (30.0, 0.0))
    duration: float = 100.0
    wobble_amplitude: float = 0.0
    wobble_period: float = 20.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("trajectory duration must be positive")
        object.__setattr__(self, "segments", tuple(tuple(map(float, s)) for s in self.segments))
        if any(len(s) != 2 or s[0] <= 0 for s in self.segments):
            raise ValueError("trajectory segments must be (positive duration, yaw_rate) pairs")


@dataclass(frozen=True)
class ImuConfig:
    accel_noise: float = 0.02  # m/s^2, per sample
    gyro_noise: float = 1e-4  # rad/sqrt(s)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FilterConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    p0_pos: float = 1.0
    p0_vel: float = 0.1
    p0_att: float = 1e-3
    p0_accel_bias: float = 0.02
    p0_gyro_bias: float = 2e-3
    conventional_bias_coupling: bool = False
    r_matrix: Optional[tuple] = None  # full 6x6 measurement covariance, overrides r_pos/r_ang
    innovation_gate: Optional[float] = 22.458  # chi-square(6) 99.9 %; None disables gating

    def p0(self) -> np.ndarray:
        std = [self.p0_pos] * 3 + [self.p0_vel] * 3 + [self.p0_att] * 3
        std += [self.p0_accel_bias] * 3 + [self.p0_gyro_bias] * 3
        return np.diag(np.square(std))

    def r(self) -> np.ndarray:
        if self.r_matrix is not None:
            return np.array(self.r_matrix, dtype=float).reshape(6, 6)
        return self.noise.measurement_covariance()


@dataclass(frozen=True)
class ScenarioConfig:
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    imu: ImuConfig = field(default_factory=ImuConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    imu_rate: float = 100.0
    vision_rate: float = 1.0
    n_features: int = 10
    pixel_noise_sigma: float = 1e-3
    field_of_view: float = 1.0  # half-width of the feature window, normalized units
    camera_mount: tuple = (math.pi, 0.0, 0.0)  # Euler angles of camera->body, nadir looking
    perturb_position: float = 2.0  # m, initial-guess error for solve / calibration
    perturb_attitude: float = math.radians(0.5)
    gravity: float = GRAVITY
    seed: int = 0
    solve_time: float = 10.0  # truth epoch used by single-solve runs

    def __post_init__(self):
        if not self.imu_rate >= self.vision_rate > 0:
            raise ValueError("need imu_rate >= vision_rate > 0")
        if self.n_features < 7:
            raise ValueError("n_features must be at least 7")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel_noise_sigma must be non-negative")
        ratio = self.imu_rate / self.vision_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of vision_rate")

    @property
    def mount(self) -> np.ndarray:
        return dcm_from_euler(self.camera_mount)


# -- terrain ---------------------------------------------------------------------


def synth_terrain(spec: TerrainSpec) -> TerrainGrid:
    """Deterministic DTM for ``spec``; rolling relief gets random phases from ``spec.seed``."""
    if spec.kind == "file":
        return load_ascii_grid(spec.path)
    x0, x1, y0, y1 = spec.extent
    nx = int(round((x1 - x0) / spec.cell_size)) + 1
    ny = int(round((y1 - y0) / spec.cell_size)) + 1
    xs = x0 + spec.cell_size * np.arange(nx)
    ys = y0 + spec.cell_size * np.arange(ny)
    X, Y = np.meshgrid(xs, ys)
    if spec.kind == "flat":
        h = np.zeros_like(X)
    elif spec.kind == "inclined":
        h = spec.slope * X
    else:
        ph = np.random.default_rng(spec.seed).uniform(0.0, 2 * np.pi, size=2)
        k = 2 * np.pi / spec.wavelength
        h = spec.amplitude * (np.sin(k * X + ph[0]) + np.sin(k * Y + ph[1]))
    return TerrainGrid(x0, y0, spec.cell_size, h)


# -- truth trajectory ---------------------------------------------------------------


class Trajectory:
    """Analytic truth: position, velocity, attitude as functions of time.

    Body x points along the horizontal velocity; with the DCM convention used
    here a yaw ``psi`` gives the heading vector ``(cos psi, -sin psi, 0)``.
    """

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        t0, psi0, p0 = 0.0, spec.heading, np.array(spec.start, dtype=float)
        bounds = []
        for dur, rate in spec.segments:
            bounds.append((t0, rate, psi0, p0.copy()))
            p0 = self._advance(p0, psi0, rate, dur)
            psi0 += rate * dur
            t0 += dur
        bounds.append((t0, 0.0, psi0, p0.copy()))
        self._starts = np.array([b[0] for b in bounds])
        self._rates = np.array([b[1] for b in bounds])
        self._psi0 = np.array([b[2] for b in bounds])
        self._p0 = np.array([b[3] for b in bounds])

    def _advance(self, p, psi0, rate, tau):
        tau = np.asarray(tau, dtype=float)
        v = self.spec.speed
        if abs(rate) < 1e-12:
            dx = v * tau * np.cos(psi0)
            dy = -v * tau * np.sin(psi0)
        else:
            psi = psi0 + rate * tau
            dx = v / rate * (np.sin(psi) - np.sin(psi0))
            dy = v / rate * (np.cos(psi) - np.cos(psi0))
        return np.stack([p[..., 0] + dx, p[..., 1] + dy, p[..., 2] + self.spec.climb_rate * tau], axis=-1)

    def _segment(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self._starts, t, side="right") - 1, 0, len(self._starts) - 1)
        return idx, t - self._starts[idx]

    def position(self, t):
        idx, tau = self._segment(t)
        out = np.empty(np.shape(t) + (3,))
        for i in np.unique(idx):
            sel = idx == i
            out[sel] = self._advance(self._p0[i], self._psi0[i], self._rates[i], tau[sel])
        return out

    def yaw(self, t):
        idx, tau = self._segment(t)
        return self._psi0[idx] + self._rates[idx] * tau

    def velocity(self, t):
        psi = self.yaw(t)
        v = self.spec.speed
        return np.stack([v * np.cos(psi), -v * np.sin(psi), np.full(np.shape(psi), self.spec.climb_rate)], axis=-1)

    def attitude(self, t):
        t = np.asarray(t, dtype=float)
        psi = self.yaw(t)
        a, per = self.spec.wobble_amplitude, self.spec.wobble_period
        phi = a * np.sin(2 * np.pi * t / per)
        theta = 0.5 * a * np.sin(2 * np.pi * t / per + 1.0)
        wrapped = np.mod(psi + np.pi, 2 * np.pi) - np.pi
        return np.stack([phi, theta, np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)], axis=-1)

    def nav_state(self, t: float) -> NavState:
        return NavState(self.position(t), self.velocity(t), self.attitude(t))

    def camera_pose(self, t: float, mount) -> Pose:
        return Pose(self.position(t), dcm_from_euler(self.attitude(t)) @ mount)


# -- sensors --------------------------------------------------------------------------


def synth_imu(traj: Trajectory, times, imu: ImuConfig, rng, gravity=GRAVITY) -> list[ImuSample]:
    """IMU increments for consecutive ``times``.

    Attitude increments are the exact rotations between truth samples.  The
    velocity increment over step k re-creates the truth velocity at the step
    midpoint, so the semi-implicit position update of :func:`ins.propagate`
    becomes a midpoint rule and noise-free integration tracks truth to second
    order in ``dt``.  Biases add ``bias * dt``; white noise adds
    ``accel_noise * dt`` and ``gyro_noise * sqrt(dt)`` per sample.
    """
    t = np.asarray(times, dtype=float)
    dts = np.diff(t)
    dcm = dcm_b_to_l_batch(traj.attitude(t))
    rel = np.einsum("kji,kjl->kil", dcm[:-1], dcm[1:])
    dtheta = -Rotation.from_matrix(rel).as_rotvec()
    v_ins = np.vstack([traj.velocity(t[:1]), traj.velocity(t[:-1] + 0.5 * dts)])
    dv_level = np.diff(v_ins, axis=0)
    dv_level[:, 2] += gravity * dts
    dv = np.einsum("kji,kj->ki", dcm[1:], dv_level)
    n = dts.size
    dv = dv + np.outer(dts, imu.accel_bias) + imu.accel_noise * dts[:, None] * rng.standard_normal((n, 3))
    dtheta = dtheta + np.outer(dts, imu.gyro_bias) + imu.gyro_noise * np.sqrt(dts)[:, None] * rng.standard_normal((n, 3))
    return [ImuSample(dv[k], dtheta[k], dts[k]) for k in range(n)]


def synth_flow(pose1: Pose, motion, grid: TerrainGrid, n: int, pixel_sigma: float, rng,
               field_of_view: float = 0.5, max_rounds: int = 8) -> FlowField:
    """Optical flow of ``n`` terrain points seen from ``pose1`` and its successor.

    Candidate image points are jittered cells of a square grid over the
    field of view; each is cast into the DTM, kept only if it lands and is in
    front of both cameras, and re-projected into frame 2.  Gaussian noise of
    ``pixel_sigma`` is added to all four coordinates.
    """
    if n < 1:
        raise ScenarioError("need at least one feature")
    pose2 = second_pose(pose1, motion)
    k = max(2, math.ceil(math.sqrt(n)))
    edges = np.linspace(-field_of_view, field_of_view, k + 1)
    width = edges[1] - edges[0]
    u1_list, u2_list = [], []
    for _ in range(max_rounds):
        cells = rng.permutation(k * k)
        jitter = rng.uniform(0.0, 1.0, size=(k * k, 2))
        u = np.stack([edges[cells % k], edges[cells // k]], axis=1) + jitter * width
        rays = (pose1.R @ homogeneous(u).T).T
        pts, _ = grid.intersect_rays(np.broadcast_to(pose1.p, rays.shape), rays, strict=False)
        ok = np.all(np.isfinite(pts), axis=1)
        c1 = (pts - pose1.p) @ pose1.R
        c2 = (pts - pose2.p) @ pose2.R
        with np.errstate(invalid="ignore", divide="ignore"):
            ok &= (c1[:, 2] > 1e-6) & (c2[:, 2] > 1e-6)
            # both image points by projection of the same ground point
            u1 = c1[:, :2] / c1[:, 2:3]
            u2 = c2[:, :2] / c2[:, 2:3]
        for a, b in zip(u1[ok], u2[ok]):
            u1_list.append(a)
            u2_list.append(b)
            if len(u1_list) == n:
                break
        if len(u1_list) == n:
            break
    if len(u1_list) < n:
        raise ScenarioError(f"only {len(u1_list)} of {n} features land on the DTM in view of both cameras")
    u1 = np.array(u1_list)
    u2 = np.array(u2_list)
    if pixel_sigma > 0:
        u1 = u1 + pixel_sigma * rng.standard_normal(u1.shape)
        u2 = u2 + pixel_sigma * rng.standard_normal(u2.shape)
    return FlowField.from_arrays(u1, u2)


def body_pose_from_camera(cam: Pose, mount) -> Pose:
    return Pose(cam.p, cam.R @ np.asarray(mount).T)


def camera_pose_from_nav(state: NavState, mount) -> Pose:
    return Pose(state.position, dcm_from_euler(state.attitude) @ mount)


def perturb_params(params, pos_sigma, att_sigma, rng):
    """Initial guess: uniform +-sigma on each component of p1, R1 and R12 angles.

    The translation ``p12`` is left at its true value.
    """
    x = np.array(params, dtype=float)
    x[0:3] += rng.uniform(-pos_sigma, pos_sigma, 3)
    x[[3, 4, 5, 9, 10, 11]] += rng.uniform(-att_sigma, att_sigma, 6)
    return x


def vision_error(cam_est: Pose, cam_true: Pose, mount) -> np.ndarray:
    """Position and attitude error of a vision fix in measurement coordinates."""
    b_est = body_pose_from_camera(cam_est, mount)
    b_true = body_pose_from_camera(cam_true, mount)
    return np.concatenate([b_est.p - b_true.p, euler_from_dcm(b_est.R @ b_true.R.T)])


# -- records --------------------------------------------------------------------------

NAV_FIELDS = ("x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi")


@dataclass
class VisionRecord:
    t: float
    used: bool
    converged: bool
    iterations: int
    residual_norm: float
    rank: int
    innovation: np.ndarray
    meas_error: np.ndarray
    message: str = ""


@dataclass
class EpisodeRecord:
    t: np.ndarray
    truth: np.ndarray
    drift: np.ndarray
    corrected: np.ndarray
    p_diag: np.ndarray
    vision: list
    seed: int

    def position_error(self, which="corrected") -> np.ndarray:
        est = getattr(self, which)
        return np.linalg.norm(est[:, 0:3] - self.truth[:, 0:3], axis=1)

    def velocity_error(self, which="corrected") -> np.ndarray:
        est = getattr(self, which)
        return np.linalg.norm(est[:, 3:6] - self.truth[:, 3:6], axis=1)

    @property
    def final_drift_error(self) -> float:
        return float(self.position_error("drift")[-1])

    @property
    def final_corrected_error(self) -> float:
        return float(self.position_error("corrected")[-1])


# -- closed loop ---------------------------------------------------------------------------


def run_episode(cfg: ScenarioConfig, grid: Optional[TerrainGrid] = None) -> EpisodeRecord:
    """One closed-loop simulation; deterministic in ``cfg.seed``."""
    grid = synth_terrain(cfg.terrain) if grid is None else grid
    traj = Trajectory(cfg.trajectory)
    imu_rng, flow_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    dt = 1.0 / cfg.imu_rate
    n_steps = int(round(cfg.trajectory.duration * cfg.imu_rate))
    every = int(round(cfg.imu_rate / cfg.vision_rate))
    times = np.arange(n_steps + 1) * dt
    samples = synth_imu(traj, times, cfg.imu, imu_rng, cfg.gravity)
    truth = np.hstack([traj.position(times), traj.velocity(times), traj.attitude(times)])
    mount = cfg.mount

    drift = corrected = traj.nav_state(0.0)
    zero_bias = bias = BiasState.zero()
    filt = ErrorStateFilter(cfg.filter.p0(), cfg.filter.noise, cfg.filter.r(),
                            cfg.filter.conventional_bias_coupling)
    drift_rows = np.empty((n_steps + 1, 9))
    corr_rows = np.empty((n_steps + 1, 9))
    p_diag = np.empty((n_steps + 1, N_STATE))
    drift_rows[0] = drift.as_array()
    corr_rows[0] = corrected.as_array()
    p_diag[0] = np.diag(filt.P)
    vision = []
    prev_cam_guess = camera_pose_from_nav(corrected, mount)
    prev_cam_true = traj.camera_pose(0.0, mount)

    for k, sample in enumerate(samples, start=1):
        drift = propagate(drift, sample, zero_bias, cfg.gravity)
        corrected = propagate(corrected, sample, bias, cfg.gravity)
        compensated = ImuSample(sample.dV - bias.accel_bias * dt, sample.dTheta, dt)
        dcm = corrected.dcm
        filt.predict(specific_force(dcm, compensated), dcm, dt)

        if k % every == 0:
            t_now = times[k]
            cam_true = traj.camera_pose(t_now, mount)
            rec, z = _vision_step(cfg, grid, flow_rng, prev_cam_true, cam_true, prev_cam_guess, corrected, t_now)
            gate = cfg.filter.innovation_gate
            if z is not None and gate is not None and filt.normalized_innovation(z) > gate:
                log.info("t=%.2f: vision fix rejected by innovation gate", t_now)
                rec.used = False
                rec.message = "innovation gate"
                z = None
            if z is not None:
                x_prior, innovation = filt.update(z)
                feedback = filt.x.copy()
                feedback[9:] -= x_prior[9:]
                corrected, bias = apply_corrections(corrected, bias, feedback)
                rec.innovation = innovation
            vision.append(rec)
            prev_cam_true = cam_true
            prev_cam_guess = camera_pose_from_nav(corrected, mount)

        drift_rows[k] = drift.as_array()
        corr_rows[k] = corrected.as_array()
        p_diag[k] = np.diag(filt.P)

    return EpisodeRecord(times, truth, drift_rows, corr_rows, p_diag, vision, cfg.seed)


def _vision_step(cfg, grid, rng, cam1_true, cam2_true, cam1_guess, corrected, t_now):
    """Synthesize flow, solve, and build the filter measurement.

    Returns ``(record, z)`` with ``z`` None when the fix is rejected.  Truth
    poses are used only to synthesize the flow and to score the fix.
    """
    nan6 = np.full(6, np.nan)
    flow = synth_flow(cam1_true, relative_motion(cam1_true, cam2_true), grid, cfg.n_features,
                      cfg.pixel_noise_sigma, rng, cfg.field_of_view)
    cam2_guess = camera_pose_from_nav(corrected, cfg.mount)
    guess = pack_params(cam1_guess, relative_motion(cam1_guess, cam2_guess))
    try:
        est = solve(guess, flow, grid, cfg.solver)
    except DtmnavError as exc:
        log.info("t=%.2f: vision fix skipped: %s", t_now, exc)
        return VisionRecord(t_now, False, False, 0, np.nan, -1, nan6, nan6, str(exc)), None
    cam2_est = second_pose(est.pose1, est.motion)
    err = vision_error(cam2_est, cam2_true, cfg.mount)
    rec = VisionRecord(t_now, False, est.converged, est.iterations, est.final_residual_norm,
                       est.jacobian_rank, nan6, err)
    if not est.converged:
        log.info("t=%.2f: solver did not converge, fix skipped", t_now)
        rec.message = "not converged"
        return rec, None
    try:
        z = compose_measurement(body_pose_from_camera(cam2_est, cfg.mount), corrected)
    except DtmnavError as exc:
        rec.message = str(exc)
        return rec, None
    rec.used = True
    return rec, z


# -- calibration and Monte Carlo ---------------------------------------------------------


@dataclass
class CalibrationResult:
    covariance: np.ndarray  # 6x6 sample covariance of vision measurement errors
    errors: np.ndarray  # (n_ok, 6)
    n_runs: int
    n_failed: int

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_runs


def solve_trial(cfg: ScenarioConfig, grid: TerrainGrid, t: float, rng, n_features=None,
                pixel_sigma=None, perturb_scale: float = 1.0):
    """One vision fix between truth epochs ``t`` and ``t + 1/vision_rate``.

    Returns ``(estimate, truth_params, initial_params, cam2_true)``; solver
    exceptions propagate.
    """
    traj = Trajectory(cfg.trajectory)
    mount = cfg.mount
    cam1 = traj.camera_pose(t, mount)
    cam2 = traj.camera_pose(t + 1.0 / cfg.vision_rate, mount)
    motion = relative_motion(cam1, cam2)
    n = cfg.n_features if n_features is None else n_features
    sigma = cfg.pixel_noise_sigma if pixel_sigma is None else pixel_sigma
    flow = synth_flow(cam1, motion, grid, n, sigma, rng, cfg.field_of_view)
    truth = pack_params(cam1, motion)
    x0 = perturb_params(truth, perturb_scale * cfg.perturb_position,
                        perturb_scale * cfg.perturb_attitude, rng)
    return solve(x0, flow, grid, cfg.solver), truth, x0, cam2


def calibrate_r(cfg: ScenarioConfig, n_runs: int, grid: Optional[TerrainGrid] = None,
                max_failure_rate: float = 0.2) -> CalibrationResult:
    """Empirical 6x6 measurement covariance from repeated single solves.

    Each run picks a random epoch on the truth trajectory, synthesizes flow,
    solves from a perturbed guess and scores the second-epoch body pose in
    filter measurement coordinates.  Failed or unconverged solves are
    counted, not scored.

    Raises
    ------
    ScenarioError
        If more than ``max_failure_rate`` of the runs fail.
    """
    if n_runs < 2:
        raise ValueError("calibrate_r needs at least two runs")
    grid = synth_terrain(cfg.terrain) if grid is None else grid
    rng = np.random.default_rng(cfg.seed)
    t_max = cfg.trajectory.duration - 1.0 / cfg.vision_rate
    errors, failed = [], 0
    for _ in range(n_runs):
        t = float(rng.uniform(0.0, t_max))
        try:
            est, _, _, cam2 = solve_trial(cfg, grid, t, rng)
        except DtmnavError as exc:
            log.info("calibration run at t=%.2f failed: %s", t, exc)
            failed += 1
            continue
        if not est.converged:
            failed += 1
            continue
        errors.append(vision_error(second_pose(est.pose1, est.motion), cam2, cfg.mount))
    if failed > max_failure_rate * n_runs:
        raise ScenarioError(f"solver failed in {failed} of {n_runs} calibration runs")
    err = np.array(errors)
    cov = np.cov(err, rowvar=False)
    return CalibrationResult(0.5 * (cov + cov.T), err, n_runs, failed)


@dataclass
class MonteCarloSummary:
    t: np.ndarray
    drift_rms: np.ndarray  # per-time position RMS over runs
    corrected_rms: np.ndarray
    drift_vel_rms: np.ndarray
    corrected_vel_rms: np.ndarray
    convergence_rate: float  # converged solves / attempted fixes
    measurement_covariance: np.ndarray
    episodes: list


def monte_carlo(cfg: ScenarioConfig, n_runs: int, workers: int = 1,
                grid: Optional[TerrainGrid] = None) -> MonteCarloSummary:
    """Run ``n_runs`` episodes with seeds ``cfg.seed + i`` and aggregate them.

    Episodes run on a thread pool; results are collected in seed order, so the
    summary does not depend on ``workers``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    grid = synth_terrain(cfg.terrain) if grid is None else grid
    cfgs = [replace(cfg, seed=cfg.seed + i) for i in range(n_runs)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(lambda c: run_episode(c, grid), cfgs))
    else:
        episodes = [run_episode(c, grid) for c in cfgs]

    def rms(which, err):
        return np.sqrt(np.mean([getattr(e, err)(which) ** 2 for e in episodes], axis=0))

    fixes = [v for e in episodes for v in e.vision]
    conv = sum(v.converged for v in fixes) / len(fixes) if fixes else float("nan")
    scored = np.array([v.meas_error for v in fixes if v.converged and np.all(np.isfinite(v.meas_error))])
    cov = np.cov(scored, rowvar=False) if len(scored) > 1 else np.full((6, 6), np.nan)
    return MonteCarloSummary(
        t=episodes[0].t,
        drift_rms=rms("drift", "position_error"),
        corrected_rms=rms("corrected", "position_error"),
        drift_vel_rms=rms("drift", "velocity_error"),
        corrected_vel_rms=rms("corrected", "velocity_error"),
        convergence_rate=conv,
        measurement_covariance=cov,
        episodes=episodes,
    )


# -- CSV output -------------------------------------------------------------------------------

SCHEMA_VERSION = 1


def _fmt(v) -> str:
    return repr(float(v))


def _write_table(path, kind, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# dtmnav {kind} schema {SCHEMA_VERSION}, {len(header)} columns\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def episode_header() -> list[str]:
    cols = ["t"]
    for prefix in ("true", "drift", "corrected"):
        cols += [f"{prefix}_{f}" for f in NAV_FIELDS]
    return cols + [f"P_diag_{i}" for i in range(1, N_STATE + 1)]


def write_episode_csv(rec: EpisodeRecord, path) -> None:
    data = np.hstack([rec.t[:, None], rec.truth, rec.drift, rec.corrected, rec.p_diag])
    _write_table(path, "episode", episode_header(), ([_fmt(v) for v in row] for row in data))


VISION_HEADER = ["t", "used", "converged", "iterations", "residual_norm", "rank"] + \
    [f"innovation_{i}" for i in range(1, 7)] + [f"meas_error_{i}" for i in range(1, 7)] + ["message"]


def write_vision_csv(rec: EpisodeRecord, path) -> None:
    def row(v: VisionRecord):
        out = [_fmt(v.t), str(int(v.used)), str(int(v.converged)), str(v.iterations),
               _fmt(v.residual_norm), str(v.rank)]
        out += [_fmt(a) for a in v.innovation] + [_fmt(a) for a in v.meas_error]
        return out + [v.message.replace(",", ";").replace("\n", " ")]

    _write_table(path, "vision", VISION_HEADER, (row(v) for v in rec.vision))


def write_mc_csv(summary: MonteCarloSummary, path) -> None:
    header = ["t", "drift_pos_rms", "corrected_pos_rms", "drift_vel_rms", "corrected_vel_rms"]
    data = np.column_stack([summary.t, summary.drift_rms, summary.corrected_rms,
                            summary.drift_vel_rms, summary.corrected_vel_rms])
    _write_table(path, "mc", header, ([_fmt(v) for v in row] for row in data))


def write_matrix_csv(mat, path) -> None:
    mat = np.asarray(mat, dtype=float)
    with open(path, "w", newline="") as fh:
        for row in mat:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_matrix_csv(path, shape=(6, 6)) -> np.ndarray:
    mat = np.loadtxt(path, delimiter=",", ndmin=2)
    if mat.shape != shape:
        raise ValueError(f"{path}: expected a {shape[0]}x{shape[1]} matrix, got {mat.shape}")
    return mat


def episode_summary(rec: EpisodeRecord) -> str:
    used = sum(v.used for v in rec.vision)
    conv = sum(v.converged for v in rec.vision)
    lines = [
        f"seed = {rec.seed}",
        f"duration_s = {float(rec.t[-1])!r}",
        f"drift_final_position_error_m = {rec.final_drift_error!r}",
        f"corrected_final_position_error_m = {rec.final_corrected_error!r}",
        f"drift_final_velocity_error_mps = {float(rec.velocity_error('drift')[-1])!r}",
        f"corrected_final_velocity_error_mps = {float(rec.velocity_error('corrected')[-1])!r}",
        f"vision_fixes = {len(rec.vision)}",
        f"vision_converged = {conv}",
        f"vision_used = {used}",
    ]
    return "\n".join(lines) + "\n"
