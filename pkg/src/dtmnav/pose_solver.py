"""DTM-constrained pose and ego-motion estimation from a flow field.

For each correspondence the first-camera ray is cast into the terrain to get
an estimated ground point ``G_E`` and normal ``N``.  The ray depth implied by
the tangent plane at ``G_E`` places the feature in the second camera frame,

    c2G = p12 + R12 @ L @ (G_E - p1),     L = q1 N^T / (N^T R1 q1),

and the residual is the part of ``c2G`` orthogonal to the observed ray
``q2``, normalized by ``|c2G|``.  The twelve unknowns are packed as
``[p1, euler(R1), p12, euler(R12)]`` using the same Euler convention as the
INS.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera_geom import EPS_DEN, Pose, RelativeMotion, homogeneous, l_operator, projection_operator
from .dtm import SurfaceContact, TerrainGrid
from .errors import DegenerateGeometryError, DtmnavError, FeatureError, GrazingIncidenceError, RayEscapesError
from .ins import dcm_b_to_l_batch, dcm_from_euler, euler_from_dcm

log = logging.getLogger(__name__)

N_PARAMS = 12


@dataclass(frozen=True)
class FlowCorrespondence:
    u1: np.ndarray
    u2: np.ndarray

    def __post_init__(self):
        u1 = np.array(self.u1, dtype=float).reshape(2)
        u2 = np.array(self.u2, dtype=float).reshape(2)
        if not (np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
            raise ValueError("image points must be finite")
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)


@dataclass(frozen=True)
class FlowField:
    """Image correspondences between two frames.

    Any count is accepted so that under-determined sets can be analysed; the
    solver rejects fewer than seven through its rank check.
    """

    correspondences: tuple

    def __post_init__(self):
        object.__setattr__(self, "correspondences", tuple(self.correspondences))
        if len(self.correspondences) == 0:
            raise ValueError("flow field is empty")

    @classmethod
    def from_arrays(cls, u1, u2) -> "FlowField":
        return cls(tuple(FlowCorrespondence(a, b) for a, b in zip(np.asarray(u1), np.asarray(u2))))

    def __len__(self):
        return len(self.correspondences)

    @property
    def u1(self) -> np.ndarray:
        return np.array([c.u1 for c in self.correspondences])

    @property
    def u2(self) -> np.ndarray:
        return np.array([c.u2 for c in self.correspondences])

    def subset(self, n: int) -> "FlowField":
        return FlowField(self.correspondences[:n])


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    step_tolerance: float = 1e-10
    residual_tolerance: float = 1e-12
    gn_stall_window: int = 3
    lm_lambda_init: float = 1e-3
    lm_lambda_factor: float = 10.0
    fd_step: float = 1e-7
    huber_threshold: Optional[float] = None
    frozen_ge: bool = False
    rank_rtol: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1 or self.gn_stall_window < 1:
            raise ValueError("iteration counts must be positive")
        for name in ("step_tolerance", "residual_tolerance", "lm_lambda_init", "fd_step", "rank_rtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lm_lambda_factor > 1:
            raise ValueError("lm_lambda_factor must exceed 1")
        if self.huber_threshold is not None and not self.huber_threshold > 0:
            raise ValueError("huber_threshold must be positive")


@dataclass
class PoseMotionEstimate:
    pose1: Pose
    motion: RelativeMotion
    converged: bool
    iterations: int
    final_residual_norm: float
    jacobian_rank: int
    params: np.ndarray = field(repr=False)
    condition_number: float = float("nan")
    switched_to_lm: bool = False


# -- parameter packing ------------------------------------------------------


def pack_params(pose1: Pose, motion: RelativeMotion) -> np.ndarray:
    return np.concatenate([pose1.p, euler_from_dcm(pose1.R), motion.p12, euler_from_dcm(motion.R12)])


def unpack_params(params) -> tuple[Pose, RelativeMotion]:
    x = np.asarray(params, dtype=float)
    return Pose(x[0:3], dcm_from_euler(x[3:6])), RelativeMotion(x[6:9], dcm_from_euler(x[9:12]))


# -- residuals ----------------------------------------------------------------


def _cast(params_batch, q1, grid):
    """Ground points and normals for every (parameter set, feature) pair."""
    m, n = params_batch.shape[0], q1.shape[0]
    r1 = dcm_b_to_l_batch(params_batch[:, 3:6])
    rays = np.einsum("mij,nj->mni", r1, q1)
    origins = np.repeat(params_batch[:, None, 0:3], n, axis=1)
    try:
        pts, nrm = grid.intersect_rays(origins.reshape(-1, 3), rays.reshape(-1, 3))
    except RayEscapesError as exc:
        feats = sorted({int(i) % n for i in exc.indices})
        raise RayEscapesError(f"ray escapes DTM for features {feats}", feats) from exc
    return pts.reshape(m, n, 3), nrm.reshape(m, n, 3), rays


def residual_batch(params_batch, flow: FlowField, grid: TerrainGrid, contacts=None, skip_bad=False):
    """Stacked residuals for many parameter vectors at once, shape ``(m, 3n)``.

    ``contacts`` (points, normals), each ``(n, 3)``, freezes the ground points
    instead of re-casting rays.  With ``skip_bad`` a feature that grazes the
    tangent plane or collapses onto the second camera centre contributes a
    zero block and a warning; otherwise :class:`FeatureError` is raised.
    """
    x = np.atleast_2d(np.asarray(params_batch, dtype=float))
    q1 = homogeneous(flow.u1)
    q2 = homogeneous(flow.u2)
    n = q1.shape[0]
    if contacts is None:
        g, nrm, rays = _cast(x, q1, grid)
    else:
        g = np.broadcast_to(contacts[0], (x.shape[0], n, 3))
        nrm = np.broadcast_to(contacts[1], (x.shape[0], n, 3))
        rays = np.einsum("mij,nj->mni", dcm_b_to_l_batch(x[:, 3:6]), q1)
    den = np.einsum("mnk,mnk->mn", nrm, rays)
    num = np.einsum("mnk,mnk->mn", nrm, g - x[:, None, 0:3])
    bad = np.abs(den) <= EPS_DEN
    depth = num / np.where(bad, 1.0, den)
    r12 = dcm_b_to_l_batch(x[:, 9:12])
    c2g = x[:, None, 6:9] + np.einsum("mij,nj->mni", r12, q1) * depth[..., None]
    norm = np.linalg.norm(c2g, axis=-1)
    bad |= norm <= EPS_DEN
    if bad.any():
        feats = sorted({int(j) for j in np.argwhere(bad)[:, 1]})
        if not skip_bad:
            raise FeatureError(f"features {feats} graze the terrain or collapse onto camera 2", feats[0])
        log.warning("excluding degenerate features %s from the residual", feats)
    along = np.einsum("mnk,nk->mn", c2g, q2) / np.einsum("nk,nk->n", q2, q2)
    res = (c2g - along[..., None] * q2) / np.where(bad, 1.0, norm)[..., None]
    res[bad] = 0.0
    return res.reshape(x.shape[0], 3 * n)


def ground_point_estimates(params, flow: FlowField, grid: TerrainGrid) -> list[SurfaceContact]:
    """Cast each first-frame ray from the candidate pose into the DTM."""
    x = np.asarray(params, dtype=float)[None, :]
    pts, nrm, _ = _cast(x, homogeneous(flow.u1), grid)
    return [SurfaceContact(p, nv) for p, nv in zip(pts[0], nrm[0])]


def residual_one(params, corr: FlowCorrespondence, contact: SurfaceContact) -> np.ndarray:
    """Normalized residual of a single correspondence (3-vector)."""
    pose1, motion = unpack_params(params)
    q1 = homogeneous(corr.u1)
    q2 = homogeneous(corr.u2)
    try:
        L = l_operator(q1, contact.normal, pose1.R)
    except GrazingIncidenceError as exc:
        raise FeatureError(str(exc)) from exc
    c2g = motion.p12 + motion.R12 @ L @ (contact.point - pose1.p)
    norm = np.linalg.norm(c2g)
    if norm <= EPS_DEN:
        raise FeatureError("feature maps onto the second camera centre")
    return projection_operator(q2, q2) @ c2g / norm


def stacked_residual(params, flow: FlowField, grid: TerrainGrid, contacts=None, skip_bad=False) -> np.ndarray:
    return residual_batch(np.asarray(params, dtype=float)[None, :], flow, grid, contacts, skip_bad)[0]


def jacobian_fd(params, flow: FlowField, grid: TerrainGrid, fd_step=1e-7, contacts=None,
                method="central", skip_bad=False) -> np.ndarray:
    """Finite-difference Jacobian of :func:`stacked_residual`, shape ``(3n, 12)``.

    Step for parameter ``j`` is ``fd_step * max(1, |x_j|)``.
    """
    x = np.asarray(params, dtype=float)
    h = fd_step * np.maximum(1.0, np.abs(x))
    eye = np.diag(h)
    if method == "central":
        batch = np.vstack([x + eye, x - eye])
        r = residual_batch(batch, flow, grid, contacts, skip_bad)
        return ((r[:N_PARAMS] - r[N_PARAMS:]) / (2 * h[:, None])).T
    if method == "forward":
        batch = np.vstack([x[None, :], x + eye])
        r = residual_batch(batch, flow, grid, contacts, skip_bad)
        return ((r[1:] - r[0]) / h[:, None]).T
    raise ValueError(f"unknown finite-difference method {method!r}")


def jacobian_rank(jac, rtol=1e-6) -> tuple[int, np.ndarray]:
    """Numerical rank after scaling columns to unit norm.

    Returns the rank and the singular values (descending) of the scaled matrix.
    """
    j = np.asarray(jac, dtype=float)
    scale = np.linalg.norm(j, axis=0)
    scale[scale == 0] = 1.0
    s = np.linalg.svd(j / scale, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0, s
    return int(np.sum(s > rtol * s[0])), s


# -- solver -------------------------------------------------------------------


def _huber_weights(res, n, threshold):
    e = np.linalg.norm(res.reshape(n, 3), axis=1)
    if threshold is None:
        return np.ones(n), 0.5 * float(e @ e)
    w = np.where(e <= threshold, 1.0, threshold / np.maximum(e, 1e-300))
    rho = np.where(e <= threshold, 0.5 * e**2, threshold * (e - 0.5 * threshold))
    return w, float(rho.sum())


def _solve_scaled(a, g):
    d = np.sqrt(np.diag(a))
    d[d == 0] = 1.0
    a_s = a / np.outer(d, d)
    y, *_ = np.linalg.lstsq(a_s, -g / d, rcond=1e-14)
    return y / d


def _cond(a):
    d = np.sqrt(np.diag(a))
    d[d == 0] = 1.0
    s = np.linalg.svd(a / np.outer(d, d), compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


# relative cost change below this is treated as rounding noise in the ray casts
_COST_RTOL = 1e-12


# LM steps must realise at least this fraction of the model-predicted decrease
_LM_MIN_GAIN = 0.1


def _improves(cost_new: float, cost_ref: float) -> bool:
    return cost_new < cost_ref - _COST_RTOL * cost_ref


def solve(initial, flow: FlowField, grid: TerrainGrid, config: SolverConfig = SolverConfig()) -> PoseMotionEstimate:
    """Estimate pose and ego-motion by Gauss-Newton, falling back to LM.

    Gauss-Newton steps are taken unconditionally until ``gn_stall_window``
    consecutive iterations fail to improve on the best (robust) cost; the solver then
    returns to the best point seen and continues with Levenberg-Marquardt for
    the rest of the run.  With a Huber threshold each step is an iteratively
    reweighted least-squares step over per-feature weights.

    Raises
    ------
    DegenerateGeometryError
        If the Jacobian at the initial guess has rank below 12.
    """
    x = np.array(initial, dtype=float).reshape(N_PARAMS)
    n = len(flow)
    robust = config.huber_threshold is not None
    contacts = None
    if config.frozen_ge:
        pts, nrm, _ = _cast(x[None, :], homogeneous(flow.u1), grid)
        contacts = (pts[0], nrm[0])

    def residual(v):
        return stacked_residual(v, flow, grid, contacts, skip_bad=robust)

    def jacobian(v):
        return jacobian_fd(v, flow, grid, config.fd_step, contacts, skip_bad=robust)

    r = residual(x)
    jac = jacobian(x)
    rank, sv = jacobian_rank(jac, config.rank_rtol)
    if rank < N_PARAMS:
        raise DegenerateGeometryError(
            f"degenerate geometry: Jacobian rank {rank} < {N_PARAMS} with {n} features", rank, sv
        )

    w, cost = _huber_weights(r, n, config.huber_threshold)
    best_x, best_cost, best_r, best_jac = x.copy(), cost, r, jac
    lm_mode = False
    lam = config.lm_lambda_init
    stall = 0
    converged = False
    cond = float("nan")
    iterations = 0

    while iterations < config.max_iterations:
        if np.linalg.norm(r) <= config.residual_tolerance:
            converged = True
            break
        iterations += 1
        log.debug("iter %d cost %.6e lm=%s lambda=%.1e", iterations, cost, lm_mode, lam)
        wr = np.repeat(w, 3)
        a = jac.T @ (wr[:, None] * jac)
        g = jac.T @ (wr * r)
        cond = _cond(a)
        if not lm_mode:
            delta = _solve_scaled(a, g)
            x_new = x + delta
            try:
                r_new = residual(x_new)
            except DtmnavError as exc:
                log.debug("GN step left the valid region: %s", exc)
                stall = config.gn_stall_window
            else:
                _, cost_new = _huber_weights(r_new, n, config.huber_threshold)
                stall = 0 if _improves(cost_new, best_cost) else stall + 1
                x, r, cost = x_new, r_new, cost_new
                if cost < best_cost:
                    best_x, best_cost, best_r = x.copy(), cost, r
                    best_jac = None
            if stall >= config.gn_stall_window:
                log.debug("Gauss-Newton stalled after %d iterations, switching to LM", iterations)
                lm_mode = True
                x, r, cost = best_x.copy(), best_r, best_cost
                jac = best_jac if best_jac is not None else jacobian(x)
                w, cost = _huber_weights(r, n, config.huber_threshold)
                continue
        else:
            damp = a + lam * np.diag(np.diag(a))
            delta = _solve_scaled(damp, g)
            x_new = x + delta
            try:
                r_new = residual(x_new)
                _, cost_new = _huber_weights(r_new, n, config.huber_threshold)
            except DtmnavError:
                cost_new = np.inf
            predicted = -(g @ delta + 0.5 * delta @ a @ delta)
            if _improves(cost_new, cost) and cost - cost_new >= _LM_MIN_GAIN * predicted:
                x, r, cost = x_new, r_new, cost_new
                best_x, best_cost, best_r = x.copy(), cost, r
                lam /= config.lm_lambda_factor
            else:
                lam *= config.lm_lambda_factor
                if np.linalg.norm(delta) <= config.step_tolerance * (np.linalg.norm(x) + config.step_tolerance):
                    converged = True
                    break
                continue
        if np.linalg.norm(delta) <= config.step_tolerance * (np.linalg.norm(x) + config.step_tolerance):
            converged = True
            break
        jac = jacobian(x)
        if not lm_mode and best_jac is None and np.array_equal(x, best_x):
            best_jac = jac
        w, cost = _huber_weights(r, n, config.huber_threshold)

    if not converged and np.linalg.norm(r) <= config.residual_tolerance:
        converged = True
    if lm_mode or not converged:
        # report the best point seen
        if best_cost < cost:
            x, r = best_x, best_r
    final_jac = jacobian(x)
    rank, _ = jacobian_rank(final_jac, config.rank_rtol)
    pose1, motion = unpack_params(x)
    return PoseMotionEstimate(
        pose1=pose1,
        motion=motion,
        converged=converged,
        iterations=iterations,
        final_residual_norm=float(np.linalg.norm(r)),
        jacobian_rank=rank,
        params=x,
        condition_number=cond,
        switched_to_lm=lm_mode,
    )
