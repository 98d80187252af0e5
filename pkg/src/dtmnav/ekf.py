"""Fifteen-state error-state Kalman filter for INS/vision fusion.

State layout (fixed)::

    0:3   position error      m
    3:6   velocity error      m/s
    6:9   attitude error      rad   (Euler angles of D_true @ D_ins^T)
    9:12  accelerometer bias  m/s^2
    12:15 gyro bias           rad/s

The measurement is the 6-vector of vision-minus-INS position and attitude
errors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .camera_geom import Pose
from .errors import FilterError
from .ins import NavState, dcm_from_euler, euler_from_dcm

N_STATE = 15
N_MEAS = 6
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
ACC_BIAS = slice(9, 12)
GYRO_BIAS = slice(12, 15)


@dataclass(frozen=True)
class NoiseConfig:
    """Process and measurement noise levels.

    ``accel_noise`` is the per-sample accelerometer noise (m/s^2), giving a
    velocity variance growth of ``accel_noise**2 * dt**2`` per step.
    ``gyro_noise`` is an angle random walk (rad/sqrt(s)), giving
    ``gyro_noise**2 * dt`` per step.  Bias intensities are random-walk
    variances per second.  ``r_pos``/``r_ang`` are measurement variances.
    """

    accel_noise: float = 0.02
    gyro_noise: float = 1e-4
    q_bias_accel: float = 1e-8
    q_bias_gyro: float = 1e-12
    r_pos: float = 1.0
    r_ang: float = 1e-4  # rad^2, about the single-fix scatter at default settings

    def __post_init__(self):
        for name in ("accel_noise", "gyro_noise", "q_bias_accel", "q_bias_gyro", "r_pos", "r_ang"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def measurement_covariance(self) -> np.ndarray:
        return np.diag([self.r_pos] * 3 + [self.r_ang] * 3)


def assemble_phi(f_vec, dcm, conventional_bias_coupling=False) -> np.ndarray:
    """Continuous-time error dynamics matrix.

    By default the accelerometer-bias block drives the attitude rows and the
    gyro-bias block drives the velocity rows.  ``conventional_bias_coupling``
    swaps the two column ranges (accel bias -> velocity, gyro bias ->
    attitude), which is the coupling consistent with :func:`ins.propagate`.
    """
    f1, f2, f3 = np.asarray(f_vec, dtype=float)
    dcm = np.asarray(dcm, dtype=float)
    phi = np.zeros((N_STATE, N_STATE))
    phi[POS, VEL] = np.eye(3)
    phi[VEL, ATT] = [[0.0, -f3, f2], [f3, 0.0, -f1], [-f2, f1, 0.0]]
    if conventional_bias_coupling:
        phi[ATT, GYRO_BIAS] = -dcm
        phi[VEL, ACC_BIAS] = -dcm
    else:
        phi[ATT, ACC_BIAS] = -dcm
        phi[VEL, GYRO_BIAS] = -dcm
    return phi


def transition(phi, dt: float) -> np.ndarray:
    """First-order discretization ``I + phi * dt``."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    return np.eye(N_STATE) + np.asarray(phi, dtype=float) * dt


def process_noise(cfg: NoiseConfig, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    q = np.zeros(N_STATE)
    q[VEL] = cfg.accel_noise**2 * dt**2
    q[ATT] = cfg.gyro_noise**2 * dt
    q[ACC_BIAS] = cfg.q_bias_accel * dt
    q[GYRO_BIAS] = cfg.q_bias_gyro * dt
    return np.diag(q)


def time_update(x_prev, p_prev, a, q):
    """Predict: navigation errors reset to zero, biases carried over.

    Returns ``(x_pred, p_pred)`` with ``p_pred = a p a^T + q`` (symmetrized).
    """
    x_pred = np.zeros(N_STATE)
    x_pred[9:] = np.asarray(x_prev, dtype=float)[9:]
    p_pred = a @ p_prev @ a.T + q
    return x_pred, 0.5 * (p_pred + p_pred.T)


def measurement_matrix() -> np.ndarray:
    h = np.zeros((N_MEAS, N_STATE))
    h[0, 0] = h[1, 1] = h[2, 2] = 1.0
    h[3, 6] = h[4, 7] = h[5, 8] = 1.0
    return h


_H = measurement_matrix()


def measurement_update(x_pred, p_pred, z, r):
    """Kalman gain, state correction and Joseph-form covariance update.

    Returns ``(x, p, gain)``.

    Raises
    ------
    FilterError
        If the innovation covariance is not positive definite.
    """
    h = _H
    x_pred = np.asarray(x_pred, dtype=float)
    s = h @ p_pred @ h.T + r
    s = 0.5 * (s + s.T)
    try:
        factor = cho_factor(s)
    except LinAlgError as exc:
        eig = np.linalg.eigvalsh(s)
        raise FilterError(
            f"innovation covariance not positive definite (eigenvalues {eig.min():.3e}..{eig.max():.3e}, "
            f"condition {np.linalg.cond(s):.3e})"
        ) from exc
    # K = P H^T S^-1  <=>  S K^T = H P
    gain = cho_solve(factor, h @ p_pred).T
    innovation = np.asarray(z, dtype=float) - h @ x_pred
    x = x_pred + gain @ innovation
    ikh = np.eye(N_STATE) - gain @ h
    p = ikh @ p_pred @ ikh.T + gain @ r @ gain.T
    return x, 0.5 * (p + p.T), gain


def innovation_condition(p_pred, r) -> float:
    return float(np.linalg.cond(_H @ p_pred @ _H.T + r))


def compose_measurement(vision_pose: Pose, ins_state: NavState) -> np.ndarray:
    """Vision-minus-INS position and attitude error, 6-vector.

    ``vision_pose.R`` is the body-to-level attitude implied by vision.
    """
    dpos = vision_pose.p - ins_state.position
    dang = euler_from_dcm(vision_pose.R @ dcm_from_euler(ins_state.attitude).T)
    return np.concatenate([dpos, dang])


class ErrorStateFilter:
    """Mutable filter instance: holds ``x`` and ``P`` between calls."""

    def __init__(self, p0, noise: NoiseConfig, r=None, conventional_bias_coupling=False):
        self.x = np.zeros(N_STATE)
        self.P = np.array(p0, dtype=float)
        self.noise = noise
        self.R = noise.measurement_covariance() if r is None else np.array(r, dtype=float)
        self.conventional_bias_coupling = conventional_bias_coupling

    def predict(self, f_vec, dcm, dt):
        phi = assemble_phi(f_vec, dcm, self.conventional_bias_coupling)
        self.x, self.P = time_update(self.x, self.P, transition(phi, dt), process_noise(self.noise, dt))

    def normalized_innovation(self, z) -> float:
        """Squared Mahalanobis length of the innovation, ``nu^T S^-1 nu``."""
        nu = np.asarray(z, dtype=float) - _H @ self.x
        s = _H @ self.P @ _H.T + self.R
        return float(nu @ np.linalg.solve(s, nu))

    def update(self, z):
        """Measurement update; returns ``(x_prior, innovation)``."""
        x_prior = self.x.copy()
        innovation = np.asarray(z, dtype=float) - _H @ x_prior
        self.x, self.P, _ = measurement_update(x_prior, self.P, z, self.R)
        return x_prior, innovation
