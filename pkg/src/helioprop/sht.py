"""Spherical harmonic analysis and synthesis on the GL x equiangular grid.

Convention (fixed once, all tests written against it): the basis functions are

    Y_l^m(theta, phi) = Pbar_l^m(cos theta) * exp(i m phi) / sqrt(2 pi)

where Pbar_l^m is the associated Legendre function *without* the
Condon-Shortley sign, normalized so that

    integral_{-1}^{1} Pbar_l^m(x) Pbar_l'^m(x) dx = delta_{l l'}.

This makes the Y_l^m orthonormal over the sphere (Y_0^0 = 1/sqrt(4 pi)) and
gives the discrete pair

    analysis:   c_lm = sum_i w_i Pbar_l^m(x_i) * G_m(theta_i),
                G_m  = sqrt(2 pi)/nlon * sum_j f_ij exp(-i m phi_j)
    synthesis:  f_ij = 1/sqrt(2 pi) * [ g_0 + 2 sum_{0<m<nlon/2} Re(g_m e^{i m phi_j})
                                            + Re(g_{nlon/2}) (-1)^j  (if present) ]
                g_m(theta_i) = sum_l c_lm Pbar_l^m(x_i)

Only m >= 0 is stored (real fields imply c_{l,-m} = conj(c_lm)). With
mmax = nlon/2 the retained band sits exactly at the Nyquist limit: that
mode's imaginary part is invisible on the grid and is forced to zero.

For lmax <= nlat - 1 the Gauss-Legendre quadrature integrates every product
Pbar_l^m Pbar_l'^m exactly, so analysis(synthesis(c)) = c to round-off.

Coefficients are stored packed and m-major; internally the Legendre tables
are zero-padded to a dense (mmax+1, nlat, lmax+1) tensor so both transform
directions run as batched matrix products(one GEMM per direction and part).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .sphere_grid import LatLonGrid, VelocityMap


class BandLimitError(ValueError):
    """Requested band limit does not fit on the grid."""


def n_modes(lmax: int, mmax: int) -> int:
    """Number of stored (l, m) pairs: sum over m of (lmax - m + 1)."""
    return (mmax + 1) * (lmax + 1) - mmax * (mmax + 1) // 2


def mode_offsets(lmax: int, mmax: int) -> np.ndarray:
    """Start index of each m-block in the packed coefficient layout."""
    counts = lmax + 1 - np.arange(mmax + 1)
    return np.concatenate(([0], np.cumsum(counts)))


@dataclass(frozen=True)
class SpectralCoeffs:
    """Packed complex coefficients, m-major: block m holds l = m .. lmax."""

    lmax: int
    mmax: int
    packed: np.ndarray  # (..., n_modes) complex128

    def __post_init__(self):
        if self.mmax > self.lmax:
            raise ValueError(f"mmax={self.mmax} exceeds lmax={self.lmax}")
        expect = n_modes(self.lmax, self.mmax)
        if self.packed.shape[-1] != expect:
            raise ValueError(
                f"packed length {self.packed.shape[-1]}, expected {expect} "
                f"for (lmax={self.lmax}, mmax={self.mmax})"
            )

    @property
    def nchannels(self) -> int:
        return int(np.prod(self.packed.shape[:-1], dtype=np.int64)) if self.packed.ndim > 1 else 1

    def get(self, l: int, m: int):
        """Coefficient c_{l,m}; negative m via the real-field conjugation rule."""
        am = abs(m)
        if not (am <= l <= self.lmax and am <= self.mmax):
            raise IndexError(f"(l={l}, m={m}) outside stored band")
        off = mode_offsets(self.lmax, self.mmax)[am]
        val = self.packed[..., off + (l - am)]
        return np.conj(val) if m < 0 else val


def legendre_table(lmax: int, mmax: int, colatitudes: np.ndarray) -> list[np.ndarray]:
    """Orthonormalized associated Legendre values, one (npts, lmax-m+1) block per m.

    Stable (l, m) recurrence on the normalized functions; no Condon-Shortley
    sign. Block m column j holds Pbar_{m+j}^m at every colatitude.
    """
    if mmax > lmax:
        raise ValueError(f"mmax={mmax} exceeds lmax={lmax}")
    x = np.cos(np.asarray(colatitudes, dtype=np.float64))
    return _legendre_blocks(lmax, mmax, x)


def _legendre_blocks(lmax: int, mmax: int, x: np.ndarray) -> list[np.ndarray]:
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    blocks = []
    pmm = np.full_like(x, 1.0 / np.sqrt(2.0))
    for m in range(mmax + 1):
        cols = lmax - m + 1
        blk = np.empty((x.size, cols), dtype=np.float64)
        blk[:, 0] = pmm
        if cols > 1:
            blk[:, 1] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            blk[:, l - m] = a * (x * blk[:, l - m - 1] - b * blk[:, l - m - 2])
        blocks.append(blk)
        if m < mmax:
            pmm = np.sqrt((2.0 * m + 3.0) / (2.0 * m + 2.0)) * s * pmm
    return blocks


@dataclass(frozen=True)
class _GridTables:
    """Dense zero-padded Legendre tensors for batched transforms.

    Stored complex so both transform directions run as batched zgemm; the
    imaginary parts are zero.
    """

    p: np.ndarray        # (mmax+1, nlat, lmax+1), column l
    p_t: np.ndarray      # (mmax+1, lmax+1, nlat)
    pw: np.ndarray       # quadrature-weighted p
    pw_t: np.ndarray
    flat_idx: np.ndarray  # packed position -> m*(lmax+1)+l


# read-mostly cache keyed by grid fingerprint and band limit
_TABLE_CACHE: dict[tuple, _GridTables] = {}
_TABLE_LOCK = threading.Lock()


def grid_tables(grid: LatLonGrid, lmax: int, mmax: int) -> _GridTables:
    key = (grid.fingerprint(), lmax, mmax)
    hit = _TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    with _TABLE_LOCK:
        hit = _TABLE_CACHE.get(key)
        if hit is None:
            blocks = _legendre_blocks(lmax, mmax, grid.cos_colatitudes)
            ncols = lmax + 1
            p = np.zeros((mmax + 1, grid.nlat, ncols))
            idx = []
            for m, blk in enumerate(blocks):
                p[m, :, m:] = blk
                idx.extend(m * ncols + l for l in range(m, lmax + 1))
            pw = grid.quadrature_weights[None, :, None] * p
            hit = _GridTables(
                p=p.astype(np.complex128),
                p_t=np.ascontiguousarray(p.transpose(0, 2, 1)).astype(np.complex128),
                pw=pw.astype(np.complex128),
                pw_t=np.ascontiguousarray(pw.transpose(0, 2, 1)).astype(np.complex128),
                flat_idx=np.array(idx),
            )
            _TABLE_CACHE[key] = hit
    return hit


def _check_band_limit(grid: LatLonGrid, lmax: int, mmax: int):
    if mmax > lmax:
        raise BandLimitError(f"mmax={mmax} exceeds lmax={lmax}")
    if grid.nlat < lmax + 1 or grid.nlon < 2 * mmax:
        raise BandLimitError(
            f"grid {grid.nlat}x{grid.nlon} too small for band limit "
            f"(lmax={lmax}, mmax={mmax}); need nlat >= lmax+1 and nlon >= 2*mmax"
        )


def _to_mode_major(x: np.ndarray) -> np.ndarray:
    """(N, a, M+1) -> contiguous (M+1, N, a) ready for batched matmul."""
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


def _force_real_blocks(packed: np.ndarray, grid: LatLonGrid, lmax: int, mmax: int) -> None:
    offs = mode_offsets(lmax, mmax)
    packed[..., offs[0] : offs[1]].imag[...] = 0.0
    if 2 * mmax == grid.nlon:
        packed[..., offs[mmax] : offs[mmax + 1]].imag[...] = 0.0


def analyze_values(values: np.ndarray, grid: LatLonGrid, lmax: int, mmax: int) -> np.ndarray:
    """Packed coefficients of real fields; ``values`` is (..., nlat, nlon)."""
    _check_band_limit(grid, lmax, mmax)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-2:] != grid.shape:
        raise ValueError(f"field shape {values.shape[-2:]} does not match grid {grid.shape}")
    t = grid_tables(grid, lmax, mmax)
    lead = values.shape[:-2]

    fm = np.fft.rfft(values.reshape((-1,) + grid.shape), axis=-1)
    gm = fm[..., : mmax + 1] * (np.sqrt(2.0 * np.pi) / grid.nlon)
    cpad = _to_mode_major(gm) @ t.pw  # (M+1, N, lmax+1)
    n = cpad.shape[1]
    flat = np.ascontiguousarray(np.moveaxis(cpad, 0, 1)).reshape(n, -1)
    out = flat[:, t.flat_idx].reshape(lead + (n_modes(lmax, mmax),))
    _force_real_blocks(out, grid, lmax, mmax)
    return out


def synthesize_values(packed: np.ndarray, grid: LatLonGrid, lmax: int, mmax: int) -> np.ndarray:
    """Real field (..., nlat, nlon) from packed coefficients.

    Total on any complex input: the components a real field cannot carry
    (imaginary parts of the m = 0 and Nyquist blocks) are projected out.
    """
    _check_band_limit(grid, lmax, mmax)
    packed = np.asarray(packed, dtype=np.complex128)
    if packed.shape[-1] != n_modes(lmax, mmax):
        raise BandLimitError(
            f"coefficient length {packed.shape[-1]} does not match (lmax={lmax}, mmax={mmax})"
        )
    t = grid_tables(grid, lmax, mmax)
    lead = packed.shape[:-1]
    nyq = grid.nlon // 2

    flat = np.zeros((int(np.prod(lead)) if lead else 1, (mmax + 1) * (lmax + 1)),
                    dtype=np.complex128)
    flat[:, t.flat_idx] = packed.reshape(flat.shape[0], -1)
    cpad = np.ascontiguousarray(flat.reshape(-1, mmax + 1, lmax + 1).swapaxes(0, 1))
    g = cpad @ t.p_t  # (M+1, N, nlat)

    spec = np.zeros((flat.shape[0], grid.nlat, nyq + 1), dtype=np.complex128)
    spec[..., : mmax + 1] = np.moveaxis(g, 0, -1) * (grid.nlon / np.sqrt(2.0 * np.pi))
    spec[..., 0] = spec[..., 0].real
    if mmax == nyq:
        spec[..., nyq] = spec[..., nyq].real
    field = np.fft.irfft(spec, n=grid.nlon, axis=-1)
    return field.reshape(lead + grid.shape)


def sht_analysis(field, lmax: int, mmax: int, grid: LatLonGrid | None = None) -> SpectralCoeffs:
    """Forward transform of a VelocityMap (or array + grid) to coefficients."""
    if isinstance(field, VelocityMap):
        grid = field.grid
        values = field.values
    else:
        if grid is None:
            raise ValueError("array input requires an explicit grid")
        values = np.asarray(field)
    return SpectralCoeffs(lmax=lmax, mmax=mmax, packed=analyze_values(values, grid, lmax, mmax))


def sht_synthesis(coeffs: SpectralCoeffs, grid: LatLonGrid) -> np.ndarray:
    """Inverse transform back to grid values."""
    return synthesize_values(coeffs.packed, grid, coeffs.lmax, coeffs.mmax)


# ----------------------------------------------------------------------------
# Adjoints of the two linear maps above, with respect to the standard real
# inner products (grid side: sum_ij a_ij b_ij; coefficient side: real and
# imaginary parts as independent coordinates). These are what reverse-mode
# differentiation of anything built on the transforms needs; they are NOT the
# inverse transforms.
# ----------------------------------------------------------------------------

def analyze_adjoint(d_packed: np.ndarray, grid: LatLonGrid, lmax: int, mmax: int) -> np.ndarray:
    """Adjoint of ``analyze_values``: coefficient cotangents -> grid cotangents."""
    _check_band_limit(grid, lmax, mmax)
    t = grid_tables(grid, lmax, mmax)
    d_packed = np.asarray(d_packed, dtype=np.complex128).copy()
    _force_real_blocks(d_packed, grid, lmax, mmax)  # those imag parts were overwritten
    lead = d_packed.shape[:-1]
    nyq = grid.nlon // 2

    flat = np.zeros((int(np.prod(lead)) if lead else 1, (mmax + 1) * (lmax + 1)),
                    dtype=np.complex128)
    flat[:, t.flat_idx] = d_packed.reshape(flat.shape[0], -1)
    cpad = flat.reshape(-1, mmax + 1, lmax + 1).transpose(1, 0, 2)
    dg = _batched_legendre(cpad, t.pw_t)  # (M+1, N, nlat)

    h = np.zeros((flat.shape[0], grid.nlat, nyq + 1), dtype=np.complex128)
    h[..., : mmax + 1] = dg.transpose(1, 2, 0) * (np.sqrt(2.0 * np.pi) / grid.nlon)
    # adjoint of numpy's rfft of a real signal: every retained bin counted once
    h[..., 1:nyq] *= 0.5
    h[..., 0] = h[..., 0].real
    h[..., nyq] = h[..., nyq].real
    out = np.fft.irfft(h, n=grid.nlon, axis=-1) * grid.nlon
    return out.reshape(lead + grid.shape)


def synthesize_adjoint(d_values: np.ndarray, grid: LatLonGrid, lmax: int, mmax: int) -> np.ndarray:
    """Adjoint of ``synthesize_values``: grid cotangents -> coefficient cotangents."""
    _check_band_limit(grid, lmax, mmax)
    t = grid_tables(grid, lmax, mmax)
    d_values = np.asarray(d_values, dtype=np.float64)
    lead = d_values.shape[:-2]
    nyq = grid.nlon // 2

    dspec = np.fft.rfft(d_values.reshape((-1,) + grid.shape), axis=-1)
    dspec[..., 1:nyq] *= 2.0 / grid.nlon
    dspec[..., 0] *= 1.0 / grid.nlon
    dspec[..., nyq] *= 1.0 / grid.nlon

    dg = dspec[..., : mmax + 1] * (grid.nlon / np.sqrt(2.0 * np.pi))
    dg = dg.transpose(2, 0, 1)  # (M+1, N, nlat)
    dg[0] = dg[0].real
    if mmax == nyq:
        dg[mmax] = dg[mmax].real  # adjoint of the real projection
    dcpad = _batched_legendre(dg, t.p)  # (M+1, N, lmax+1)
    n = dcpad.shape[1]
    flat = dcpad.transpose(1, 0, 2).reshape(n, -1)
    return flat[:, t.flat_idx].reshape(lead + (n_modes(lmax, mmax),))
