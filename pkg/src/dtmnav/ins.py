"""Flat-Earth strapdown mechanization and Euler/DCM attitude helpers.

The local-level frame is z-up and gravity acts along -z; Coriolis and Earth
rate are ignored.  The body-to-level DCM is the product of the three
elemental rotation matrices below.  To first order
``dcm_b_to_l(v) ~ I - skew(v)`` for a small angle triple ``v``, and gyro
increments are composed with the same sign (:func:`increment_rotation`), so
one small-rotation convention serves attitude kinematics, filter error angles
and corrections alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAttitudeError

GRAVITY = 9.80665
GIMBAL_MARGIN = 1e-6


def _vec3(a):
    a = np.array(a, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"components must be finite, got {a}")
    a.setflags(write=False)
    return a


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def dcm_b_to_l(phi: float, theta: float, psi: float) -> np.ndarray:
    """Body-to-level DCM ``Phi @ Theta @ Psi`` from roll, pitch, yaw."""
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    psi_m = np.array([[cp, sp, 0.0], [-sp, cp, 0.0], [0.0, 0.0, 1.0]])
    theta_m = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
    phi_m = np.array([[1.0, 0.0, 0.0], [0.0, cf, sf], [0.0, -sf, cf]])
    return phi_m @ theta_m @ psi_m


def dcm_from_euler(angles) -> np.ndarray:
    return dcm_b_to_l(*angles)


def dcm_b_to_l_batch(angles) -> np.ndarray:
    """Vectorized :func:`dcm_b_to_l` over ``(..., 3)`` angle triples."""
    a = np.asarray(angles, dtype=float)
    cf, sf = np.cos(a[..., 0]), np.sin(a[..., 0])
    ct, st = np.cos(a[..., 1]), np.sin(a[..., 1])
    cp, sp = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(a.shape[:-1] + (3, 3))
    out[..., 0, 0] = ct * cp
    out[..., 0, 1] = ct * sp
    out[..., 0, 2] = -st
    out[..., 1, 0] = -cf * sp + sf * st * cp
    out[..., 1, 1] = cf * cp + sf * st * sp
    out[..., 1, 2] = sf * ct
    out[..., 2, 0] = sf * sp + cf * st * cp
    out[..., 2, 1] = -sf * cp + cf * st * sp
    out[..., 2, 2] = cf * ct
    return out


def _wrap(a):
    # (-pi, pi]
    return np.where(a <= -np.pi, a + 2 * np.pi, a)


def euler_from_dcm(dcm, check=True) -> np.ndarray:
    """Inverse of :func:`dcm_b_to_l`: ``(phi, theta, psi)``.

    Raises
    ------
    DegenerateAttitudeError
        If ``check`` and the pitch is within 1e-6 rad of +-pi/2.
    """
    d = np.asarray(dcm, dtype=float)
    s = float(np.clip(-d[0, 2], -1.0, 1.0))
    theta = np.arcsin(s)
    if check and abs(theta) >= np.pi / 2 - GIMBAL_MARGIN:
        raise DegenerateAttitudeError(f"pitch {theta:.9f} rad is at gimbal lock")
    phi = np.arctan2(d[1, 2], d[2, 2])
    psi = np.arctan2(d[0, 1], d[0, 0])
    return np.array([float(_wrap(phi)), theta, float(_wrap(psi))])


def increment_rotation(v) -> np.ndarray:
    """Exact rotation for an angle-increment vector, ``expm(-skew(v))``."""
    v = np.asarray(v, dtype=float)
    a = float(np.sqrt(v @ v))
    k = skew(v)
    if a < 1e-8:
        return np.eye(3) - k + 0.5 * (k @ k)
    return np.eye(3) - (np.sin(a) / a) * k + ((1.0 - np.cos(a)) / a**2) * (k @ k)


@dataclass(frozen=True)
class NavState:
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray  # roll, pitch, yaw

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(self, "velocity", _vec3(self.velocity))
        object.__setattr__(self, "attitude", _vec3(self.attitude))

    @property
    def dcm(self) -> np.ndarray:
        return dcm_from_euler(self.attitude)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.attitude])


@dataclass(frozen=True)
class ImuSample:
    dV: np.ndarray
    dTheta: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "dV", _vec3(self.dV))
        object.__setattr__(self, "dTheta", _vec3(self.dTheta))
        if not self.dt > 0:
            raise ValueError(f"IMU sample interval must be positive, got {self.dt}")


@dataclass(frozen=True)
class BiasState:
    accel_bias: np.ndarray
    gyro_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "accel_bias", _vec3(self.accel_bias))
        object.__setattr__(self, "gyro_bias", _vec3(self.gyro_bias))

    @classmethod
    def zero(cls) -> "BiasState":
        return cls(np.zeros(3), np.zeros(3))


def specific_force(dcm, sample: ImuSample) -> np.ndarray:
    """Level-frame specific force ``dcm @ dV / dt``."""
    return np.asarray(dcm, dtype=float) @ (sample.dV / sample.dt)


def propagate(state: NavState, sample: ImuSample, bias_correction: BiasState, gravity=GRAVITY) -> NavState:
    """One strapdown step: attitude, then velocity, then position.

    Velocity uses the updated attitude and position uses the updated
    velocity (semi-implicit Euler).
    """
    dt = sample.dt
    dth = sample.dTheta - bias_correction.gyro_bias * dt
    dcm = dcm_from_euler(state.attitude) @ increment_rotation(dth)
    dv = dcm @ (sample.dV - bias_correction.accel_bias * dt)
    velocity = state.velocity + dv
    velocity[2] -= gravity * dt
    position = state.position + velocity * dt
    return NavState(position, velocity, euler_from_dcm(dcm, check=False))


def apply_corrections(state: NavState, bias: BiasState, x) -> tuple[NavState, BiasState]:
    """Feed a 15-component error state back into the navigation solution.

    Attitude errors are composed on the left, ``D <- dcm(dphi, dtheta, dpsi) @ D``,
    which inverts the measurement definition ``dcm(delta) = D_true @ D^T``.
    """
    x = np.asarray(x, dtype=float)
    dcm = dcm_b_to_l(*x[6:9]) @ dcm_from_euler(state.attitude)
    new_state = NavState(
        state.position + x[0:3],
        state.velocity + x[3:6],
        euler_from_dcm(dcm, check=False),
    )
    new_bias = BiasState(bias.accel_bias + x[9:12], bias.gyro_bias + x[12:15])
    return new_state, new_bias
