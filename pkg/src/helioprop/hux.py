"""Forward upwind marching of radial solar-wind speed (HUX-f).

Each latitude ring is advanced independently from the inner boundary to the
outer radius with the first-order upwind stencil

    v[i+1, j] = v[i, j] + (dr_i * Omega / v[i, j]) * (v[i, j+1] - v[i, j]) / dphi

(longitude periodic, dr in km). An optional one-time empirical acceleration
boost is applied to the boundary slice before marching:

    v' = v * (1 + alpha * (1 - exp(-r0 / r_h)))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sphere_grid import R_SUN_KM, CubeMeta, RadialGrid, VelocityCube, VelocityMap

SIDEREAL_ROTATION_DAYS = 25.38


class CflError(RuntimeError):
    """Upwind stability condition violated."""

    def __init__(self, step: int, cfl: float, v_min: float):
        self.step = step
        self.cfl = cfl
        self.v_min = v_min
        super().__init__(
            f"CFL={cfl:.3f} > 1 at radial step {step} (min velocity {v_min:.3f} km/s)"
        )


class NumericsError(RuntimeError):
    """Non-finite values appeared during marching."""


@dataclass(frozen=True)
class HuxConfig:
    omega_rot: float = 2.0 * np.pi / (SIDEREAL_ROTATION_DAYS * 86400.0)  # rad/s
    alpha: float = 0.15
    r_h: float = 50.0  # acceleration scale length, R_sun
    apply_acceleration: bool = True

    def __post_init__(self):
        if self.omega_rot <= 0 or self.alpha < 0 or self.r_h <= 0:
            raise ValueError("require omega_rot > 0, alpha >= 0, r_h > 0")


def hux_accelerate_boundary(vmap: VelocityMap, cfg: HuxConfig, r0: float) -> VelocityMap:
    """Boundary velocity boost; identity when disabled or alpha = 0."""
    if np.any(vmap.values <= 0.0):
        raise ValueError("acceleration needs strictly positive velocities")
    if not cfg.apply_acceleration or cfg.alpha == 0.0:
        return vmap
    factor = 1.0 + cfg.alpha * (1.0 - np.exp(-r0 / cfg.r_h))
    return VelocityMap(vmap.grid, vmap.values * factor)


def hux_forward(
    boundary: VelocityMap,
    rgrid: RadialGrid,
    cfg: HuxConfig | None = None,
    meta: CubeMeta | None = None,
) -> VelocityCube:
    """March the boundary map outward through every radial step."""
    cfg = cfg or HuxConfig()
    if np.any(boundary.values <= 0.0):
        raise ValueError("boundary velocities must be strictly positive")

    grid = boundary.grid
    dphi = grid.dphi
    dr_km = rgrid.dr * R_SUN_KM

    out = np.empty((rgrid.nr,) + grid.shape, dtype=np.float64)
    out[0] = hux_accelerate_boundary(boundary, cfg, float(rgrid.r[0])).values

    for i in range(rgrid.nr - 1):
        v = out[i]
        v_min = float(v.min())
        if v_min <= 0.0:
            raise NumericsError(f"non-positive velocity before radial step {i}")
        cfl = dr_km[i] * cfg.omega_rot / (v_min * dphi)
        if cfl > 1.0:
            raise CflError(i, cfl, v_min)
        east = np.roll(v, -1, axis=1)  # periodic j+1 neighbor
        out[i + 1] = v + (dr_km[i] * cfg.omega_rot / v) * (east - v) / dphi
        if not np.all(np.isfinite(out[i + 1])):
            raise NumericsError(f"non-finite velocity produced at radial step {i}")

    return VelocityCube(rgrid=rgrid, grid=grid, values=out, meta=meta or CubeMeta())
