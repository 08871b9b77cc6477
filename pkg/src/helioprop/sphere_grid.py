"""Spherical and radial grids plus the velocity-field containers.

Latitude is always stored as colatitude theta in (0, pi), with nodes at the
Gauss-Legendre points of the chosen resolution; longitude is equispaced on
[0, 2*pi). All containers are immutable after construction (arrays are marked
read-only) and safe to share across threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import InitVar, dataclass, field

import numpy as np

R_SUN_KM = 6.957e5  # IAU nominal solar radius in km
AU_RSUN = 215.032   # 1 astronomical unit in solar radii


def gauss_legendre_nodes(n: int, tol: float = 1e-15, max_iter: int = 100):
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].

    Newton iteration on the Legendre three-term recurrence, started from the
    Chebyshev-angle approximation of the roots. Nodes are returned in
    ascending order and are exactly antisymmetric about 0; weights sum to 2
    up to round-off.
    """
    if n < 1:
        raise ValueError(f"need at least one node, got n={n}")
    nodes = np.empty(n, dtype=np.float64)
    weights = np.empty(n, dtype=np.float64)

    m = (n + 1) // 2
    k = np.arange(1, m + 1, dtype=np.float64)
    z = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    if n % 2 == 1:
        z[-1] = 0.0  # middle root of an odd-degree rule is exact

    for _ in range(max_iter):
        # evaluate P_n and P_{n-1} at z via the recurrence
        p1 = np.ones_like(z)
        p2 = np.zeros_like(z)
        for j in range(1, n + 1):
            p1, p2 = ((2 * j - 1) * z * p1 - (j - 1) * p2) / j, p1
        # derivative from P'_n = n (z P_n - P_{n-1}) / (z^2 - 1)
        pp = n * (z * p1 - p2) / (z * z - 1.0)
        dz = p1 / pp
        znew = z - dz
        if n % 2 == 1:
            znew[-1] = 0.0
        converged = np.all(np.abs(dz) <= tol)
        z = znew
        if converged:
            break
    else:
        raise RuntimeError(f"Gauss-Legendre Newton iteration failed for n={n}")

    # final derivative at the converged roots, for the weights
    p1 = np.ones_like(z)
    p2 = np.zeros_like(z)
    for j in range(1, n + 1):
        p1, p2 = ((2 * j - 1) * z * p1 - (j - 1) * p2) / j, p1
    pp = n * (z * p1 - p2) / (z * z - 1.0)
    w = 2.0 / ((1.0 - z * z) * pp * pp)

    # fill both symmetric halves explicitly
    for i in range(m):
        nodes[n - 1 - i] = z[i]
        nodes[i] = -z[i]
        weights[i] = w[i]
        weights[n - 1 - i] = w[i]
    if n % 2 == 1:
        nodes[m - 1] = 0.0
    return nodes, weights


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LatLonGrid:
    """Gauss-Legendre (latitude) x equispaced (longitude) spherical grid.

    ``colatitudes`` are strictly increasing in (0, pi); ``cos_colatitudes``
    keeps the raw GL nodes (descending) so quadrature stays exact;
    ``quadrature_weights`` sum to 2.
    """

    nlat: int
    nlon: int
    colatitudes: np.ndarray
    quadrature_weights: np.ndarray
    longitudes: np.ndarray
    cos_colatitudes: np.ndarray

    def __post_init__(self):
        if self.nlat < 2 or self.nlon < 2 or self.nlon % 2:
            raise ValueError(
                f"grid needs nlat >= 2 and even nlon >= 2, got {self.nlat}x{self.nlon}"
            )
        for name in ("colatitudes", "quadrature_weights", "longitudes", "cos_colatitudes"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        theta = self.colatitudes
        if theta.shape != (self.nlat,) or np.any(np.diff(theta) <= 0):
            raise ValueError("colatitudes must be strictly increasing, one per row")
        if theta[0] <= 0 or theta[-1] >= np.pi:
            raise ValueError("poles must not be grid points")

    @property
    def dphi(self) -> float:
        return 2.0 * np.pi / self.nlon

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    def fingerprint(self) -> str:
        """Stable key for caches of per-grid precomputed tables."""
        h = hashlib.sha256()
        h.update(np.int64([self.nlat, self.nlon]).tobytes())
        h.update(self.cos_colatitudes.tobytes())
        return h.hexdigest()


def build_gauss_legendre_grid(nlat: int, nlon: int) -> LatLonGrid:
    """Grid with nlat GL latitude nodes and nlon equispaced longitudes."""
    if nlat < 2 or nlon < 2 or nlon % 2:
        raise ValueError(f"invalid grid size {nlat}x{nlon} (nlon must be even, both >= 2)")
    x, w = gauss_legendre_nodes(nlat)
    # descending nodes <-> ascending colatitude
    x = x[::-1].copy()
    w = w[::-1].copy()
    lon = np.arange(nlon) * (2.0 * np.pi / nlon)
    return LatLonGrid(
        nlat=nlat,
        nlon=nlon,
        colatitudes=np.arccos(x),
        quadrature_weights=w,
        longitudes=lon,
        cos_colatitudes=x,
    )


@dataclass(frozen=True)
class RadialGrid:
    """Strictly increasing radial nodes in solar radii."""

    nr: int
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", _freeze(self.r))
        if self.nr < 2 or self.r.shape != (self.nr,):
            raise ValueError(f"radial grid needs nr >= 2 matching nodes, got nr={self.nr}")
        if np.any(np.diff(self.r) <= 0):
            raise ValueError("radial nodes must be strictly increasing")
        if self.r[0] < 1.0:
            raise ValueError(f"innermost radius {self.r[0]} R_sun is below the solar surface")

    @property
    def dr(self) -> np.ndarray:
        """Per-step spacing in solar radii (length nr - 1)."""
        return np.diff(self.r)


def build_radial_grid(nr: int = 140, r_min: float = 30.0, r_max: float = AU_RSUN) -> RadialGrid:
    """Uniform radial grid from r_min to r_max inclusive."""
    if nr < 2:
        raise ValueError(f"need nr >= 2, got {nr}")
    if not (0.0 < r_min < r_max):
        raise ValueError(f"need 0 < r_min < r_max, got [{r_min}, {r_max}]")
    return RadialGrid(nr=nr, r=np.linspace(r_min, r_max, nr))


@dataclass(frozen=True)
class CubeMeta:
    """Provenance tag attached to a cube.

    ``source`` is "synthetic" for data produced by this package (generator or
    model output) and "external" for anything loaded from outside.
    """

    carrington_rotation: int | None = None
    instrument: str | None = None
    source: str = "synthetic"

    def __post_init__(self):
        if self.source not in ("synthetic", "external"):
            raise ValueError(f"unknown source {self.source!r}")


@dataclass(frozen=True)
class VelocityMap:
    """Radial velocity (km/s) on one LatLonGrid; rows are latitude."""

    grid: LatLonGrid
    values: np.ndarray
    check_physical: InitVar[bool] = False

    def __post_init__(self, check_physical):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("velocity map contains non-finite values")
        if check_physical and (np.any(self.values <= 0.0) or np.any(self.values >= 3000.0)):
            raise ValueError("velocities outside the physical range (0, 3000) km/s")


@dataclass(frozen=True)
class VelocityCube:
    """Full radial stack of velocity maps for one rotation."""

    rgrid: RadialGrid
    grid: LatLonGrid
    values: np.ndarray  # (nr, nlat, nlon)
    meta: CubeMeta = field(default_factory=CubeMeta)

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        expect = (self.rgrid.nr,) + self.grid.shape
        if self.values.shape != expect:
            raise ValueError(f"cube shape {self.values.shape}, expected {expect}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")

    @property
    def nr(self) -> int:
        return self.rgrid.nr

    @property
    def slices(self) -> tuple[VelocityMap, ...]:
        return tuple(VelocityMap(self.grid, self.values[i]) for i in range(self.nr))

    @classmethod
    def from_slices(cls, rgrid: RadialGrid, slices, meta: CubeMeta | None = None) -> "VelocityCube":
        slices = list(slices)
        if len(slices) != rgrid.nr:
            raise ValueError(f"{len(slices)} slices for {rgrid.nr} radial nodes")
        grid = slices[0].grid
        if any(s.grid is not grid and s.grid != grid for s in slices):
            raise ValueError("all slices must share one grid")
        values = np.stack([s.values for s in slices])
        return cls(rgrid=rgrid, grid=grid, values=values, meta=meta or CubeMeta())
