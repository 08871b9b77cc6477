"""Spectral neural operator on the sphere with hand-rolled reverse mode.

Architecture: a pointwise encoder MLP lifts the boundary channel to
``hidden_channels``; each of ``n_layers`` blocks applies a spectral
convolution (analysis -> dense per-mode channel mixing -> synthesis) followed
by a pointwise two-layer MLP, plus a learnable per-channel residual:

    u_out = MLP(synthesize(W_lm . analyze(u))) + skip_scale * u

A pointwise decoder MLP maps to the output radial channels. The per-mode
weights are dense over channels but diagonal over (l, m), so integer
longitude rotations of the input rotate the output exactly.

The computation graph is fixed, so gradients are computed by a small
hand-written tape instead of a general autodiff engine; ``backward`` returns
exact reverse-mode gradients (complex weights handled as real/imaginary
pairs), verified against finite differences in the test suite.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .sphere_grid import LatLonGrid
from . import sht


class ShapeError(ValueError):
    """Input does not match the configured grid or channel layout."""


class NumericsError(RuntimeError):
    """Non-finite values inside the network."""


class TapeError(RuntimeError):
    """Tape does not belong to the supplied parameters."""


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _act_forward(name: str, z):
    """(activation(z), aux) where aux lets the backward pass skip the erf."""
    if name == "gelu":
        phi = 0.5 * (1.0 + erf(z / _SQRT2))
        return z * phi, phi
    return np.maximum(z, 0.0), None


def _act_grad(name: str, z, aux):
    if name == "gelu":
        return aux + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
    return (z > 0.0).astype(np.float64)


_ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class OperatorConfig:
    n_layers: int
    hidden_channels: int
    out_channels: int
    lmax: int = 110
    mmax: int = 64
    in_channels: int = 1
    mlp_hidden_factor: float = 2.0
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.hidden_channels, self.out_channels, self.in_channels) < 1:
            raise ValueError("layer/channel counts must be positive")
        if not (0 <= self.mmax <= self.lmax):
            raise ValueError(f"need 0 <= mmax <= lmax, got lmax={self.lmax}, mmax={self.mmax}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.mlp_hidden_factor <= 0:
            raise ValueError("mlp_hidden_factor must be positive")

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.mlp_hidden_factor * self.hidden_channels)))

    @property
    def n_modes(self) -> int:
        return sht.n_modes(self.lmax, self.mmax)


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class BlockParams:
    spectral: np.ndarray  # (n_modes, c_in, c_out) complex128, dense per mode
    mlp: MlpParams
    skip_scale: np.ndarray  # (channels,)


_NONCE = itertools.count(1)


@dataclass
class OperatorParams:
    cfg: OperatorConfig
    encoder: MlpParams
    blocks: list[BlockParams]
    decoder: MlpParams
    nonce: int = field(default_factory=lambda: next(_NONCE))


def leaf_specs(cfg: OperatorConfig) -> list[tuple[str, tuple, np.dtype]]:
    """(name, shape, dtype) of every parameter tensor, in declaration order."""
    c, h, m = cfg.hidden_channels, cfg.mlp_hidden, cfg.n_modes
    specs = [
        ("encoder.w1", (c, cfg.in_channels), np.float64),
        ("encoder.b1", (c,), np.float64),
        ("encoder.w2", (c, c), np.float64),
        ("encoder.b2", (c,), np.float64),
    ]
    for k in range(cfg.n_layers):
        specs += [
            (f"block{k}.spectral", (m, c, c), np.complex128),
            (f"block{k}.mlp.w1", (h, c), np.float64),
            (f"block{k}.mlp.b1", (h,), np.float64),
            (f"block{k}.mlp.w2", (c, h), np.float64),
            (f"block{k}.mlp.b2", (c,), np.float64),
            (f"block{k}.skip_scale", (c,), np.float64),
        ]
    specs += [
        ("decoder.w1", (c, c), np.float64),
        ("decoder.b1", (c,), np.float64),
        ("decoder.w2", (cfg.out_channels, c), np.float64),
        ("decoder.b2", (cfg.out_channels,), np.float64),
    ]
    return specs


def param_count(cfg: OperatorConfig) -> int:
    """Scalar parameter count (complex tensors count real and imaginary parts)."""
    total = 0
    for _, shape, dtype in leaf_specs(cfg):
        n = int(np.prod(shape, dtype=np.int64))
        total += 2 * n if dtype == np.complex128 else n
    return total


def param_leaves(params: OperatorParams) -> list[np.ndarray]:
    leaves = [params.encoder.w1, params.encoder.b1, params.encoder.w2, params.encoder.b2]
    for blk in params.blocks:
        leaves += [blk.spectral, blk.mlp.w1, blk.mlp.b1, blk.mlp.w2, blk.mlp.b2, blk.skip_scale]
    leaves += [params.decoder.w1, params.decoder.b1, params.decoder.w2, params.decoder.b2]
    return leaves


def params_from_leaves(cfg: OperatorConfig, leaves) -> OperatorParams:
    leaves = list(leaves)
    specs = leaf_specs(cfg)
    if len(leaves) != len(specs):
        raise ValueError(f"{len(leaves)} leaves for {len(specs)} parameter tensors")
    for arr, (name, shape, dtype) in zip(leaves, specs):
        if arr.shape != shape or arr.dtype != dtype:
            raise ValueError(f"leaf {name}: got {arr.shape}/{arr.dtype}, want {shape}/{dtype}")
    it = iter(leaves)

    def mlp():
        return MlpParams(next(it), next(it), next(it), next(it))

    encoder = mlp()
    blocks = []
    for _ in range(cfg.n_layers):
        spectral = next(it)
        blocks.append(BlockParams(spectral, mlp(), next(it)))
    decoder = mlp()
    return OperatorParams(cfg=cfg, encoder=encoder, blocks=blocks, decoder=decoder)


def copy_params(params: OperatorParams) -> OperatorParams:
    return params_from_leaves(params.cfg, [a.copy() for a in param_leaves(params)])


def init_params(cfg: OperatorConfig) -> OperatorParams:
    """Deterministic initialization from cfg.seed.

    Pointwise weights are uniform on +-1/sqrt(fan_in); spectral weights are
    complex Gaussian with total std 1/hidden_channels; biases start at zero
    and skip scales at one (plain residual).
    """
    rng = np.random.default_rng(cfg.seed)
    leaves = []
    part_std = 1.0 / (cfg.hidden_channels * np.sqrt(2.0))
    for name, shape, dtype in leaf_specs(cfg):
        if dtype == np.complex128:
            re = rng.normal(scale=part_std, size=shape)
            im = rng.normal(scale=part_std, size=shape)
            leaves.append(re + 1j * im)
        elif name.endswith(("b1", "b2")):
            leaves.append(np.zeros(shape))
        elif name.endswith("skip_scale"):
            leaves.append(np.ones(shape))
        else:
            bound = 1.0 / np.sqrt(shape[1])
            leaves.append(rng.uniform(-bound, bound, size=shape))
    return params_from_leaves(cfg, leaves)


# ----------------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------------

def _pointwise(x, w, b):
    # x: (B, C, nlat, nlon) -> (B, O, nlat, nlon)
    B, C, nlat, nlon = x.shape
    y = w @ x.reshape(B, C, nlat * nlon)
    y += b[:, None]
    return y.reshape(B, w.shape[0], nlat, nlon)


def _pointwise_backward(dy, w, x_in):
    B, O, nlat, nlon = dy.shape
    dy3 = dy.reshape(B, O, nlat * nlon)
    x3 = x_in.reshape(B, x_in.shape[1], nlat * nlon)
    dw = np.tensordot(dy3, x3, axes=([0, 2], [0, 2]))
    db = dy3.sum(axis=(0, 2))
    dx = (w.T @ dy3).reshape(x_in.shape)
    return dx, dw, db


def _mode_mix(coeffs, weights):
    """out[b, o, m] = sum_i coeffs[b, i, m] * weights[m, i, o], batched over modes."""
    cm = np.ascontiguousarray(coeffs.transpose(2, 0, 1))  # (modes, B, I)
    return (cm @ weights).transpose(1, 2, 0)  # (B, O, modes)


def spectral_conv(weights, values, grid: LatLonGrid, lmax: int, mmax: int):
    """Per-mode channel mixing in harmonic space; linear in the input.

    ``values`` is (B, C_in, nlat, nlon); ``weights`` is (n_modes, C_in, C_out).
    """
    c = sht.analyze_values(values, grid, lmax, mmax)
    cw = _mode_mix(c, weights)
    return sht.synthesize_values(cw, grid, lmax, mmax)


@dataclass
class _BlockTape:
    u_in: np.ndarray
    coeffs: np.ndarray  # analysis output, pre-weight
    s: np.ndarray       # post-synthesis, MLP input
    z1: np.ndarray
    a1: np.ndarray
    aux1: np.ndarray | None


@dataclass
class ForwardTape:
    """Recorded activations; replaying reruns the identical computation."""

    params_nonce: int
    grid: LatLonGrid
    x: np.ndarray
    enc_z1: np.ndarray
    enc_a1: np.ndarray
    enc_aux1: np.ndarray | None
    blocks: list[_BlockTape]
    dec_in: np.ndarray
    dec_z1: np.ndarray
    dec_a1: np.ndarray
    dec_aux1: np.ndarray | None
    y: np.ndarray


def forward(params: OperatorParams, x, grid: LatLonGrid, record: bool = False):
    """Map (B, in_channels, nlat, nlon) to (B, out_channels, nlat, nlon).

    Returns (y, tape) with tape None unless ``record``.
    """
    cfg = params.cfg
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != grid.shape:
        raise ShapeError(
            f"input shape {x.shape}, expected (B, {cfg.in_channels}, {grid.nlat}, {grid.nlon})"
        )
    act = cfg.activation

    enc_z1 = _pointwise(x, params.encoder.w1, params.encoder.b1)
    enc_a1, enc_aux1 = _act_forward(act, enc_z1)
    u = _pointwise(enc_a1, params.encoder.w2, params.encoder.b2)

    block_tapes = []
    for k, blk in enumerate(params.blocks):
        u_in = u
        c = sht.analyze_values(u_in, grid, cfg.lmax, cfg.mmax)
        cw = _mode_mix(c, blk.spectral)
        s = sht.synthesize_values(cw, grid, cfg.lmax, cfg.mmax)
        z1 = _pointwise(s, blk.mlp.w1, blk.mlp.b1)
        a1, aux1 = _act_forward(act, z1)
        m_out = _pointwise(a1, blk.mlp.w2, blk.mlp.b2)
        u = m_out + blk.skip_scale[None, :, None, None] * u_in
        if not np.all(np.isfinite(u)):
            raise NumericsError(f"non-finite activations after block {k}")
        if record:
            block_tapes.append(_BlockTape(u_in=u_in, coeffs=c, s=s, z1=z1, a1=a1, aux1=aux1))

    dec_in = u
    dec_z1 = _pointwise(dec_in, params.decoder.w1, params.decoder.b1)
    dec_a1, dec_aux1 = _act_forward(act, dec_z1)
    y = _pointwise(dec_a1, params.decoder.w2, params.decoder.b2)
    if not np.all(np.isfinite(y)):
        raise NumericsError("non-finite output after decoder")

    tape = None
    if record:
        tape = ForwardTape(
            params_nonce=params.nonce,
            grid=grid,
            x=x,
            enc_z1=enc_z1,
            enc_a1=enc_a1,
            enc_aux1=enc_aux1,
            blocks=block_tapes,
            dec_in=dec_in,
            dec_z1=dec_z1,
            dec_a1=dec_a1,
            dec_aux1=dec_aux1,
            y=y,
        )
    return y, tape


def replay_tape(params: OperatorParams, tape: ForwardTape) -> np.ndarray:
    """Re-run the recorded computation; bit-identical to the taped output."""
    if tape.params_nonce != params.nonce:
        raise TapeError("tape was recorded with different parameters")
    y, _ = forward(params, tape.x, tape.grid, record=False)
    return y


def backward(params: OperatorParams, tape: ForwardTape, output_grad):
    """Exact reverse-mode gradients of the recorded forward computation.

    Returns (grads, input_grad) with grads a list of arrays aligned with
    ``param_leaves`` / ``leaf_specs`` order. Gradients with respect to
    complex spectral weights are complex arrays holding d/d(real) + i d/d(imag).
    """
    if tape.params_nonce != params.nonce:
        raise TapeError("stale tape: parameters have changed since it was recorded")
    cfg = params.cfg
    grid = tape.grid
    dy = np.asarray(output_grad, dtype=np.float64)
    if dy.shape != tape.y.shape:
        raise ShapeError(f"output_grad shape {dy.shape}, expected {tape.y.shape}")
    act = cfg.activation

    da1d, d_wd2, d_bd2 = _pointwise_backward(dy, params.decoder.w2, tape.dec_a1)
    dz1d = da1d * _act_grad(act, tape.dec_z1, tape.dec_aux1)
    du, d_wd1, d_bd1 = _pointwise_backward(dz1d, params.decoder.w1, tape.dec_in)

    block_grads = []
    for k in range(cfg.n_layers - 1, -1, -1):
        blk = params.blocks[k]
        bt = tape.blocks[k]
        du_out = du
        d_skip = np.einsum("bcij,bcij->c", du_out, bt.u_in)
        da1, d_w2, d_b2 = _pointwise_backward(du_out, blk.mlp.w2, bt.a1)
        dz1 = da1 * _act_grad(act, bt.z1, bt.aux1)
        ds, d_w1, d_b1 = _pointwise_backward(dz1, blk.mlp.w1, bt.s)
        dcw = sht.synthesize_adjoint(ds, grid, cfg.lmax, cfg.mmax)
        dcw_m = np.ascontiguousarray(dcw.transpose(2, 0, 1))  # (modes, B, O)
        c_m = np.ascontiguousarray(np.conj(bt.coeffs).transpose(2, 1, 0))  # (modes, I, B)
        d_spec = c_m @ dcw_m  # (modes, I, O)
        dc = (dcw_m @ np.conj(blk.spectral).transpose(0, 2, 1)).transpose(1, 2, 0)
        du = sht.analyze_adjoint(dc, grid, cfg.lmax, cfg.mmax)
        du += blk.skip_scale[None, :, None, None] * du_out
        block_grads.append([d_spec, d_w1, d_b1, d_w2, d_b2, d_skip])

    da1e, d_we2, d_be2 = _pointwise_backward(du, params.encoder.w2, tape.enc_a1)
    dz1e = da1e * _act_grad(act, tape.enc_z1, tape.enc_aux1)
    dx, d_we1, d_be1 = _pointwise_backward(dz1e, params.encoder.w1, tape.x)

    grads = [d_we1, d_be1, d_we2, d_be2]
    for g in reversed(block_grads):
        grads += g
    grads += [d_wd1, d_bd1, d_wd2, d_bd2]
    return grads, dx


def config_to_dict(cfg: OperatorConfig) -> dict:
    return {
        "n_layers": cfg.n_layers,
        "hidden_channels": cfg.hidden_channels,
        "out_channels": cfg.out_channels,
        "lmax": cfg.lmax,
        "mmax": cfg.mmax,
        "in_channels": cfg.in_channels,
        "mlp_hidden_factor": cfg.mlp_hidden_factor,
        "activation": cfg.activation,
        "seed": cfg.seed,
    }


def config_from_dict(d: dict) -> OperatorConfig:
    return OperatorConfig(**d)
