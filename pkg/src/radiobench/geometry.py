"""Locator poses, angle/position conversions, and the joint ToA-AoA estimator.

Conventions used throughout the toolkit:

* World frame is right-handed, z up, units metres.
* A locator pose is a position plus a 3x3 right-handed orthonormal
  orientation matrix whose columns are the locator's local axes
  expressed in world coordinates.  A local direction ``v`` maps to the
  world as ``orientation @ v``; a world offset maps into the local
  frame as ``orientation.T @ (x - position)``.
* Azimuth is measured in the local x-y plane from +x towards +y,
  elevation from that plane towards +z.  Range is the straight-line
  distance in metres.
* Transmit-time bias ``tau`` is in seconds; each measured range is the
  true range plus ``tau * speed_of_light``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import (
    ConfigurationError,
    DegenerateGeometryError,
    DomainError,
    OptimisationError,
    ShapeError,
)

SPEED_OF_LIGHT = 299792458.0

_ORTHO_TOL = 1e-9


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise ShapeError(f"{name} must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class LocatorPose:
    """Rigid pose of one locator: position plus orthonormal orientation."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = _as_vec3(self.position, "position")
        rot = np.asarray(self.orientation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ShapeError(f"orientation must have shape (3, 3), got {rot.shape}")
        if not np.all(np.isfinite(rot)):
            raise DomainError("orientation must be finite")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=_ORTHO_TOL):
            raise DomainError("orientation must be orthonormal")
        if not math.isclose(float(np.linalg.det(rot)), 1.0, abs_tol=1e-6):
            raise DomainError("orientation must be right-handed (det +1)")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", rot)

    def world_to_local(self, point) -> np.ndarray:
        return self.orientation.T @ (_as_vec3(point, "point") - self.position)

    def local_to_world(self, point) -> np.ndarray:
        return self.orientation @ _as_vec3(point, "point") + self.position


@dataclass(frozen=True)
class TaoaTriple:
    """One locator's angle-and-range measurement in its local frame."""

    azimuth: float
    elevation: float
    range: float

    def __post_init__(self):
        for name in ("azimuth", "elevation", "range"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if not -math.pi < self.azimuth <= math.pi:
            raise DomainError(f"azimuth must lie in (-pi, pi], got {self.azimuth}")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise DomainError(
                f"elevation must lie in [-pi/2, pi/2], got {self.elevation}"
            )
        if self.range < 0:
            raise DomainError(f"range must be non-negative, got {self.range}")

    def unit_vector(self) -> np.ndarray:
        return angles_to_unit_vector(self.azimuth, self.elevation)


def angles_to_unit_vector(azimuth: float, elevation: float) -> np.ndarray:
    """Map (azimuth, elevation) to a unit direction in the same frame."""
    az = float(azimuth)
    el = float(elevation)
    if not (math.isfinite(az) and math.isfinite(el)):
        raise DomainError("angles must be finite")
    if not -math.pi < az <= math.pi:
        raise DomainError(f"azimuth must lie in (-pi, pi], got {az}")
    if not -math.pi / 2 <= el <= math.pi / 2:
        raise DomainError(f"elevation must lie in [-pi/2, pi/2], got {el}")
    ce = math.cos(el)
    return np.array([ce * math.cos(az), ce * math.sin(az), math.sin(el)])


def unit_vector_to_angles(direction) -> tuple[float, float]:
    """Inverse of angles_to_unit_vector for a nonzero 3-vector."""
    d = _as_vec3(direction, "direction")
    norm = float(np.linalg.norm(d))
    if norm < 1e-12:
        raise DegenerateGeometryError("direction vector has (near-)zero length")
    d = d / norm
    el = math.asin(min(1.0, max(-1.0, d[2])))
    az = math.atan2(d[1], d[0])
    # atan2 returns -pi at the branch cut; keep azimuth in (-pi, pi]
    if az <= -math.pi:
        az = math.pi
    return az, el


def taoa_to_position(pose: LocatorPose, taoa: TaoaTriple) -> np.ndarray:
    """World position implied by one locator's angle/range measurement."""
    return pose.local_to_world(taoa.unit_vector() * taoa.range)


def position_to_taoa(pose: LocatorPose, user_position) -> TaoaTriple:
    """Angle/range of a world position as seen from one locator.

    Raises DegenerateGeometryError when the position coincides with the
    locator (direction undefined).
    """
    local = pose.world_to_local(user_position)
    rng = float(np.linalg.norm(local))
    if rng < 1e-9:
        raise DegenerateGeometryError("user position coincides with the locator")
    az, el = unit_vector_to_angles(local)
    return TaoaTriple(azimuth=az, elevation=el, range=rng)


# ---------------------------------------------------------------------------
# Joint ToA-AoA maximum-likelihood estimation


@dataclass
class MleConfig:
    """Weights and optimiser settings for the joint ToA-AoA estimate.

    toa_weights multiply each locator's Gaussian range log-term,
    toa_sigmas are the per-locator range noise scales in metres, and
    aoa_concentrations weight the angular alignment reward.  Defaults
    follow the inverse-variance rule for ranges and a flat angular
    concentration of 50.
    """

    toa_weights: np.ndarray
    toa_sigmas: np.ndarray
    aoa_concentrations: np.ndarray
    speed_of_light: float = SPEED_OF_LIGHT
    restarts: int = 8
    max_iters: int = 4000
    tol: float = 1e-8

    def __post_init__(self):
        self.toa_weights = np.atleast_1d(np.asarray(self.toa_weights, dtype=np.float64))
        self.toa_sigmas = np.atleast_1d(np.asarray(self.toa_sigmas, dtype=np.float64))
        self.aoa_concentrations = np.atleast_1d(
            np.asarray(self.aoa_concentrations, dtype=np.float64)
        )
        n = len(self.toa_sigmas)
        if len(self.toa_weights) != n or len(self.aoa_concentrations) != n:
            raise ConfigurationError("weight arrays must share one length per locator")
        if np.any(self.toa_sigmas <= 0):
            raise ConfigurationError("toa_sigmas must be positive")
        if np.any(self.toa_weights < 0) or np.any(self.aoa_concentrations < 0):
            raise ConfigurationError("weights must be non-negative")
        if self.speed_of_light <= 0:
            raise ConfigurationError("speed_of_light must be positive")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")

    @classmethod
    def defaults(cls, n_locators: int, sigma: float = 0.05, kappa: float = 50.0,
                 **kwargs) -> "MleConfig":
        """Inverse-variance range weights and a flat angular concentration."""
        sig = np.full(n_locators, float(sigma))
        return cls(
            toa_weights=1.0 / sig**2,
            toa_sigmas=sig,
            aoa_concentrations=np.full(n_locators, float(kappa)),
            **kwargs,
        )


@dataclass(frozen=True)
class PositionEstimate:
    position: np.ndarray
    transmit_time: float
    log_likelihood: float

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec3(self.position, "position"))
        if not (math.isfinite(self.transmit_time) and math.isfinite(self.log_likelihood)):
            raise OptimisationError("estimate fields must be finite")


_LOG_INV_SQRT_2PI = -0.5 * math.log(2.0 * math.pi)


def _measurement_arrays(taoas, poses):
    if len(taoas) != len(poses):
        raise ShapeError("need one TAoA measurement per locator pose")
    if len(taoas) == 0:
        raise ConfigurationError("need at least one locator")
    pos = np.stack([p.position for p in poses])           # (M, 3)
    # AoA unit vectors rotated to world: Omega_m @ u_m
    unit_world = np.stack([p.orientation @ t.unit_vector() for p, t in zip(poses, taoas)])
    ranges = np.array([t.range for t in taoas])
    return pos, unit_world, ranges


def joint_log_likelihood(x, tau: float, taoas, poses, cfg: MleConfig) -> float:
    """Joint log-likelihood of a candidate position and transmit-time bias.

    Sum over locators of a weighted Gaussian log-density of the range
    residual (measured range minus geometric range minus tau*c) plus a
    concentration-weighted cosine alignment between the measured arrival
    direction and the actual direction to the candidate.
    """
    x = _as_vec3(x, "x")
    pos, unit_world, ranges = _measurement_arrays(taoas, poses)
    if len(cfg.toa_sigmas) != len(taoas):
        raise ConfigurationError("cfg arrays must match the number of locators")
    offsets = x[None, :] - pos                             # (M, 3)
    dists = np.linalg.norm(offsets, axis=1)
    if np.any(dists < 1e-9):
        raise DegenerateGeometryError("candidate position coincides with a locator")
    resid = ranges - dists - float(tau) * cfg.speed_of_light
    toa_term = cfg.toa_weights * (_LOG_INV_SQRT_2PI - resid**2 / (2.0 * cfg.toa_sigmas**2))
    cosines = np.einsum("md,md->m", unit_world, offsets) / dists
    aoa_term = cfg.aoa_concentrations * cosines
    value = float(np.sum(toa_term) + np.sum(aoa_term))
    if not math.isfinite(value):
        raise DomainError("log-likelihood is non-finite for this input")
    return value


def _seed_grid(poses, bounds, n_xy: int = 8, n_z: int = 2) -> np.ndarray:
    if bounds is None:
        pos = np.stack([p.position for p in poses])
        lo = pos.min(axis=0)
        hi = pos.max(axis=0)
        span = hi - lo
        # Locator rigs are often coplanar; the z-axis must still be
        # covered on both sides or a range-mirror ghost wins the seeding.
        pad = np.maximum(0.1 * span, 0.5 * span.max())
        pad = np.where(span > 0.5 * span.max(), 0.1 * span, pad)
        lo = lo - pad
        hi = hi + pad
    else:
        lo = _as_vec3(bounds[0], "bounds[0]")
        hi = _as_vec3(bounds[1], "bounds[1]")
        if np.any(hi <= lo):
            raise ConfigurationError("bounds must satisfy hi > lo per axis")
    xs = np.linspace(lo[0], hi[0], n_xy)
    ys = np.linspace(lo[1], hi[1], n_xy)
    zs = np.linspace(lo[2], hi[2], n_z)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1), gz.ravel()


def joint_mle_estimate(taoas, poses, cfg: MleConfig, bounds=None) -> PositionEstimate:
    """Maximise the joint log-likelihood over position and transmit time.

    Seeds a coarse 8x8x2 grid over the locator bounding box (tau = 0),
    then runs Nelder-Mead ascents from the `cfg.restarts` best grid
    points.  Tau is optimised in nanoseconds so all four coordinates
    share a comparable scale; ties between restarts go to the lowest
    restart index.  Deterministic: no randomness anywhere.
    """
    if len(taoas) < 2:
        raise ConfigurationError("joint estimate needs >= 2 locators for (x, tau)")
    pos, unit_world, ranges = _measurement_arrays(taoas, poses)
    if len(cfg.toa_sigmas) != len(taoas):
        raise ConfigurationError("cfg arrays must match the number of locators")
    c_per_ns = cfg.speed_of_light * 1e-9
    w = cfg.toa_weights
    inv_two_sig2 = 1.0 / (2.0 * cfg.toa_sigmas**2)
    kappa = cfg.aoa_concentrations
    const_term = float(np.sum(w) * _LOG_INV_SQRT_2PI)

    def neg_ll(z: np.ndarray) -> float:
        offsets = z[None, :3] - pos
        dists = np.sqrt(np.einsum("md,md->m", offsets, offsets))
        if np.any(dists < 1e-9):
            return np.inf
        resid = ranges - dists - z[3] * c_per_ns
        val = (
            const_term
            - float(np.sum(w * resid**2 * inv_two_sig2))
            + float(np.sum(kappa * np.einsum("md,md->m", unit_world, offsets) / dists))
        )
        return -val if math.isfinite(val) else np.inf

    grid, grid_z = _seed_grid(poses, bounds)
    offsets = grid[:, None, :] - pos[None, :, :]           # (G, M, 3)
    dists = np.linalg.norm(offsets, axis=2)
    dists = np.maximum(dists, 1e-9)
    resid = ranges[None, :] - dists
    grid_ll = (
        const_term
        - np.sum(w * resid**2 * inv_two_sig2, axis=1)
        + np.sum(kappa * np.einsum("gmd,md->gm", offsets, unit_world) / dists, axis=1)
    )
    # Balance restarts across the two seed z-layers so coplanar rigs get
    # starts on both sides of their vertical mirror plane.
    order_all = np.argsort(-grid_ll, kind="stable")
    z_mid = 0.5 * (grid_z.min() + grid_z.max())
    low = [i for i in order_all if grid_z[i] <= z_mid]
    high = [i for i in order_all if grid_z[i] > z_mid]
    order = []
    for pair in zip(low, high):
        order.extend(pair)
    order.extend(low[len(high):] or high[len(low):])
    order = order[: cfg.restarts]

    # Initial simplex steps: ~1 m spatially, 40 ns in tau.  The tau step
    # matters: seeding tau at 0 with scipy's default simplex would leave
    # the optimiser unable to reach biases of tens of nanoseconds.
    steps = np.array([1.0, 1.0, 0.5, 40.0])

    best = None
    for start_idx in order:
        z0 = np.array([grid[start_idx, 0], grid[start_idx, 1], grid[start_idx, 2], 0.0])
        simplex = np.tile(z0, (5, 1))
        simplex[1:] += np.diag(steps)
        res = minimize(
            neg_ll,
            z0,
            method="Nelder-Mead",
            options={
                "xatol": cfg.tol,
                "fatol": cfg.tol,
                "maxiter": cfg.max_iters,
                "maxfev": cfg.max_iters,
                "initial_simplex": simplex,
            },
        )
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not math.isfinite(best.fun) or not np.all(np.isfinite(best.x)):
        raise OptimisationError("no finite optimum found")
    x_hat = best.x[:3].copy()
    tau_hat = float(best.x[3]) * 1e-9
    return PositionEstimate(
        position=x_hat,
        transmit_time=tau_hat,
        log_likelihood=joint_log_likelihood(x_hat, tau_hat, taoas, poses, cfg),
    )
