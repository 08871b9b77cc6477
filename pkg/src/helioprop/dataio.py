"""Cube and checkpoint persistence plus the synthetic dataset generator.

Cube file (little-endian throughout):

    magic   4 bytes  "HWC1"
    version u32      currently 1
    nr, nlat, nlon   u32 each
    r       float64[nr]              radial nodes, solar radii
    data    float64[nr*nlat*nlon]    (r, lat, lon) order, km/s

A JSON sidecar at ``<path>.json`` carries the CubeMeta and units. Latitude
nodes are not stored: cubes live on the deterministic Gauss-Legendre grid of
their (nlat, nlon), which the loader rebuilds.

Checkpoint file:

    magic   4 bytes  "SFNP"
    version u32
    len     u32      length of the UTF-8 JSON config block
    config  JSON     operator config + normalization bounds
    tensors raw      float64, declaration order; complex tensors as
                     interleaved (re, im) float64 pairs

Both formats round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import sfno, sht
from .hux import HuxConfig, hux_forward
from .sphere_grid import (
    AU_RSUN,
    CubeMeta,
    RadialGrid,
    VelocityCube,
    VelocityMap,
    build_gauss_legendre_grid,
    build_radial_grid,
)
from .training import NormBounds

CUBE_MAGIC = b"HWC1"
CUBE_VERSION = 1
CKPT_MAGIC = b"SFNP"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; the message names the offending byte offset."""


def _read_exact(fh, n: int, what: str):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated file: wanted {n} bytes for {what} at offset {fh.tell() - len(buf)}, "
            f"got {len(buf)}"
        )
    return buf


def save_cube(cube: VelocityCube, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<IIII", CUBE_VERSION, cube.nr, cube.grid.nlat, cube.grid.nlon))
        fh.write(np.ascontiguousarray(cube.rgrid.r, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cube.values, dtype="<f8").tobytes())
    sidecar = {
        "units": {"r": "R_sun", "v": "km/s"},
        "meta": {
            "carrington_rotation": cube.meta.carrington_rotation,
            "instrument": cube.meta.instrument,
            "source": cube.meta.source,
        },
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cube(path) -> VelocityCube:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CUBE_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0, expected {CUBE_MAGIC!r}")
        version, nr, nlat, nlon = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != CUBE_VERSION:
            raise FormatError(f"unsupported cube version {version} at offset 4")
        if nr < 2 or nlat < 2 or nlon < 2:
            raise FormatError(f"implausible dimensions ({nr}, {nlat}, {nlon}) at offset 8")
        r = np.frombuffer(_read_exact(fh, 8 * nr, "radial grid"), dtype="<f8")
        data = np.frombuffer(
            _read_exact(fh, 8 * nr * nlat * nlon, "payload"), dtype="<f8"
        ).reshape(nr, nlat, nlon)
        extra = fh.read(1)
        if extra:
            raise FormatError(f"trailing bytes at offset {fh.tell() - 1}")
    meta = CubeMeta(source="external")
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            m = json.load(fh).get("meta", {})
        meta = CubeMeta(
            carrington_rotation=m.get("carrington_rotation"),
            instrument=m.get("instrument"),
            source=m.get("source", "external"),
        )
    return VelocityCube(
        rgrid=RadialGrid(nr=nr, r=r.copy()),
        grid=build_gauss_legendre_grid(nlat, nlon),
        values=data.copy(),
        meta=meta,
    )


def save_checkpoint(path, params: sfno.OperatorParams, bounds: NormBounds | None = None) -> None:
    cfg_block = {
        "operator": sfno.config_to_dict(params.cfg),
        "norm_bounds": None if bounds is None else {"v_min": bounds.v_min, "v_max": bounds.v_max},
    }
    blob = json.dumps(cfg_block, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for leaf in sfno.param_leaves(params):
            dt = "<c16" if np.iscomplexobj(leaf) else "<f8"
            fh.write(np.ascontiguousarray(leaf, dtype=dt).tobytes())


def load_checkpoint(path) -> tuple[sfno.OperatorParams, NormBounds | None]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0, expected {CKPT_MAGIC!r}")
        version, blob_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at offset 4")
        cfg_block = json.loads(_read_exact(fh, blob_len, "config block").decode("utf-8"))
        cfg = sfno.config_from_dict(cfg_block["operator"])
        leaves = []
        for name, shape, dtype in sfno.leaf_specs(cfg):
            n = int(np.prod(shape, dtype=np.int64))
            width = 16 if dtype == np.complex128 else 8
            raw = _read_exact(fh, width * n, f"tensor {name}")
            arr = np.frombuffer(raw, dtype="<c16" if width == 16 else "<f8").reshape(shape)
            leaves.append(arr.copy())
        extra = fh.read(1)
        if extra:
            raise FormatError(f"trailing bytes at offset {fh.tell() - 1}")
    params = sfno.params_from_leaves(cfg, leaves)
    nb = cfg_block.get("norm_bounds")
    bounds = None if nb is None else NormBounds(v_min=nb["v_min"], v_max=nb["v_max"])
    return params, bounds


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Random fast/slow stream boundaries propagated with the upwind solver.

    The ground-truth dynamics are the solver itself, so the learning problem
    has an exact answer and solver self-comparison yields all-zero metrics.
    """

    n_cubes: int
    seed: int = 0
    v_slow: float = 350.0
    v_fast: float = 750.0
    stream_lmax: int = 12
    interface_sharpness: float = 25.0
    nr: int = 140
    nlat: int = 111
    nlon: int = 128
    r_min: float = 30.0
    r_max: float = AU_RSUN
    hux: HuxConfig = field(default_factory=HuxConfig)

    def __post_init__(self):
        if self.n_cubes < 0:
            raise ValueError("n_cubes must be non-negative")
        if not (0.0 < self.v_slow < self.v_fast):
            raise ValueError("need 0 < v_slow < v_fast")
        if self.stream_lmax > self.nlat - 1:
            raise ValueError(
                f"stream_lmax={self.stream_lmax} exceeds grid band limit {self.nlat - 1}"
            )
        if self.interface_sharpness <= 0:
            raise ValueError("interface_sharpness must be positive")


def generate_boundary(cfg: SynthConfig, rng: np.random.Generator) -> VelocityMap:
    """One random bimodal stream map on the configured grid.

    A band-limited Gaussian random field is standardized and squashed through
    a logistic at the configured sharpness, then mapped onto
    [v_slow, v_fast]; sharp interfaces emerge where the field changes sign.
    """
    grid = build_gauss_legendre_grid(cfg.nlat, cfg.nlon)
    lmax = cfg.stream_lmax
    mmax = min(lmax, cfg.nlon // 2)
    nm = sht.n_modes(lmax, mmax)
    offs = sht.mode_offsets(lmax, mmax)
    coeffs = rng.normal(size=nm) + 1j * rng.normal(size=nm)
    coeffs[offs[0] : offs[1]] = coeffs[offs[0] : offs[1]].real
    if 2 * mmax == cfg.nlon:
        coeffs[offs[mmax] : offs[mmax + 1]] = coeffs[offs[mmax] : offs[mmax + 1]].real
    fld = sht.synthesize_values(coeffs, grid, lmax, mmax)
    fld = (fld - fld.mean()) / fld.std()
    squash = 1.0 / (1.0 + np.exp(-cfg.interface_sharpness * fld))
    return VelocityMap(grid, cfg.v_slow + (cfg.v_fast - cfg.v_slow) * squash)


def generate_dataset(cfg: SynthConfig) -> list[VelocityCube]:
    """n_cubes upwind-propagated cubes with per-cube derived RNG streams."""
    rgrid = build_radial_grid(cfg.nr, cfg.r_min, cfg.r_max)
    cubes = []
    for i in range(cfg.n_cubes):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i)))
        boundary = generate_boundary(cfg, rng)
        meta = CubeMeta(carrington_rotation=None, instrument="synthetic", source="synthetic")
        cubes.append(hux_forward(boundary, rgrid, cfg.hux, meta=meta))
    return cubes


class SplitError(ValueError):
    pass


def split_dataset(cubes, fraction: float | None = None, cr_ranges=None):
    """(train, test) split, chronological-fraction or Carrington-range based.

    ``cr_ranges`` is ((train_lo, train_hi), (test_lo, test_hi)), inclusive;
    overlapping ranges are rejected and cubes must carry CR metadata. Cubes
    outside both ranges are dropped.
    """
    cubes = list(cubes)
    if not cubes:
        raise SplitError("empty dataset")
    if (fraction is None) == (cr_ranges is None):
        raise SplitError("give exactly one of fraction or cr_ranges")
    if fraction is not None:
        if not (0.0 < fraction < 1.0):
            raise SplitError(f"fraction {fraction} outside (0, 1)")
        n_train = int(round(len(cubes) * fraction))
        train, test = cubes[:n_train], cubes[n_train:]
    else:
        (t_lo, t_hi), (e_lo, e_hi) = cr_ranges
        if t_lo > t_hi or e_lo > e_hi:
            raise SplitError("ranges must be (lo, hi) with lo <= hi")
        if max(t_lo, e_lo) <= min(t_hi, e_hi):
            raise SplitError(f"overlapping ranges {cr_ranges}")
        train, test = [], []
        for c in cubes:
            cr = c.meta.carrington_rotation
            if cr is None:
                raise SplitError("cr_ranges split requires Carrington metadata on every cube")
            if t_lo <= cr <= t_hi:
                train.append(c)
            elif e_lo <= cr <= e_hi:
                test.append(c)
    if not train or not test:
        raise SplitError(f"split left an empty side ({len(train)} train / {len(test)} test)")
    return train, test


# ----------------------------------------------------------------------------
# dataset manifest and training history
# ----------------------------------------------------------------------------

def write_manifest(path, cube_paths, cfg: SynthConfig, splits=None) -> None:
    """JSON manifest listing cube files, their split labels, and the generator config."""
    entries = []
    for i, p in enumerate(cube_paths):
        entries.append({
            "path": str(p),
            "split": None if splits is None else splits[i],
        })
    gen = asdict(cfg)
    doc = {"schema": "helioprop-manifest", "version": 1, "generator": gen, "cubes": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != "helioprop-manifest":
        raise FormatError(f"not a dataset manifest: {path}")
    return doc


def write_loss_history_csv(path, history) -> None:
    """CSV with columns epoch, train_loss, val_loss."""
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch},{tr!r},{va!r}\n")
