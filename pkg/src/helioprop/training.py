"""Loss, normalization, teacher-forced windowing, Adam, and model selection.

The training loss is a layer-wise 2-D L2: the Euclidean norm of each
(batch, channel) slice, averaged over the unmasked slices. It is not divided
by pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sfno
from .sphere_grid import VelocityCube


class EmptyLossError(ValueError):
    """Every (batch, channel) slice is masked out."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class NormBounds:
    """Min-max bounds in km/s, computed from the training split only."""

    v_min: float
    v_max: float

    def __post_init__(self):
        if not (np.isfinite(self.v_min) and np.isfinite(self.v_max) and self.v_min < self.v_max):
            raise ValueError(f"degenerate bounds [{self.v_min}, {self.v_max}]")

    @classmethod
    def from_cubes(cls, cubes) -> "NormBounds":
        v_min = min(float(c.values.min()) for c in cubes)
        v_max = max(float(c.values.max()) for c in cubes)
        return cls(v_min=v_min, v_max=v_max)


def normalize(x, bounds: NormBounds):
    """Affine map sending [v_min, v_max] to [0, 1]; values outside pass through unclipped."""
    return (np.asarray(x, dtype=np.float64) - bounds.v_min) / (bounds.v_max - bounds.v_min)


def denormalize(x, bounds: NormBounds):
    return np.asarray(x, dtype=np.float64) * (bounds.v_max - bounds.v_min) + bounds.v_min


def _slice_norms(pred, truth):
    diff = pred - truth
    return np.sqrt(np.einsum("bcij,bcij->bc", diff, diff))


def loss_l2_2d(pred, truth, mask=None) -> float:
    """Mean over unmasked (b, c) pairs of the per-slice Euclidean norm."""
    loss, _, _ = _loss_terms(pred, truth, mask)
    return loss


def _loss_terms(pred, truth, mask=None):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 4:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    norms = _slice_norms(pred, truth)
    if mask is None:
        mask = np.ones(norms.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != norms.shape:
            raise ValueError(f"mask shape {mask.shape}, expected {norms.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyLossError("all (batch, channel) slices are masked")
    total = float(norms[mask].sum())
    return total / n, total, n


def loss_l2_2d_with_grad(pred, truth, mask=None):
    """(loss, d loss / d pred). Zero-error slices get zero (sub)gradient."""
    loss, grad, _, _ = _loss_with_grad_terms(pred, truth, mask)
    return loss, grad


def _loss_with_grad_terms(pred, truth, mask=None):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    loss, total, n = _loss_terms(pred, truth, mask)
    norms = _slice_norms(pred, truth)
    if mask is None:
        mask_arr = np.ones(norms.shape, dtype=bool)
    else:
        mask_arr = np.asarray(mask, dtype=bool)
    scale = np.zeros_like(norms)
    ok = mask_arr & (norms > 0.0)
    scale[ok] = 1.0 / (norms[ok] * n)
    grad = (pred - truth) * scale[:, :, None, None]
    return loss, grad, total, n


# ----------------------------------------------------------------------------
# teacher-forced windows
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSample:
    """One teacher-forced window: ground-truth input slice k, targets k+1..k+H."""

    k: int
    input: np.ndarray       # (nlat, nlon)
    target: np.ndarray      # (H, nlat, nlon); masked rows are zero-filled
    valid_mask: np.ndarray  # (H,) bool


def window_starts(nr: int, horizon: int, every_index: bool = False) -> list[int]:
    """Rollout-aligned window starts 0, H, 2H, ... (or every index when asked)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if nr < 2:
        raise ValueError("need at least 2 radial slices")
    step = 1 if every_index else horizon
    return [k for k in range(0, nr - 1, step)]


def make_teacher_forced_samples(cube, horizon: int, every_index: bool = False):
    """Window a cube (or raw (nr, nlat, nlon) array) into TrainSamples.

    Targets past the outermost slice are masked, never fabricated; over the
    rollout-aligned windows of an nr-slice cube the valid targets sum to
    nr - 1.
    """
    values = cube.values if isinstance(cube, VelocityCube) else np.asarray(cube)
    nr = values.shape[0]
    samples = []
    for k in window_starts(nr, horizon, every_index):
        target = np.zeros((horizon,) + values.shape[1:], dtype=np.float64)
        valid = np.zeros(horizon, dtype=bool)
        hi = min(k + horizon, nr - 1)
        nvalid = hi - k
        target[:nvalid] = values[k + 1 : hi + 1]
        valid[:nvalid] = True
        samples.append(TrainSample(k=k, input=values[k].copy(), target=target, valid_mask=valid))
    return samples


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    horizon: int
    learning_rate: float = 8e-4
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    folds: int = 5
    val_fraction: float = 0.1
    every_index_windows: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.horizon < 1 or self.batch_size < 1 or self.folds < 1:
            raise ValueError("epochs, horizon, batch_size and folds must be positive")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise ValueError("invalid optimizer constants")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class AdamState:
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_leaves(cls, leaves) -> "AdamState":
        return cls(
            t=0,
            m=[np.zeros(_real_view(p).shape) for p in leaves],
            v=[np.zeros(_real_view(p).shape) for p in leaves],
        )


def _real_view(arr: np.ndarray) -> np.ndarray:
    """Complex tensors are optimized as independent real/imaginary components."""
    return arr.view(np.float64) if np.iscomplexobj(arr) else arr


def adam_step(leaves, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new leaves, mutates state."""
    if len(leaves) != len(grads):
        raise ValueError("leaves/grads length mismatch")
    for g in grads:
        if not np.all(np.isfinite(_real_view(np.ascontiguousarray(g)))):
            raise FloatingPointError("non-finite gradient")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(leaves, grads)):
        pr = _real_view(p)
        gr = _real_view(np.ascontiguousarray(g))
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * gr
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * gr * gr
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new = pr - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        out.append(new.view(p.dtype) if np.iscomplexobj(p) else new)
    return out


# ----------------------------------------------------------------------------
# training driver
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: sfno.OperatorParams
    bounds: NormBounds
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float


def _stack_samples(samples):
    x = np.stack([s.input for s in samples])[:, None]
    y = np.stack([s.target for s in samples])
    mask = np.stack([s.valid_mask for s in samples])
    return x, y, mask


def _eval_loss(params, grid, x, y, mask, batch_size):
    total, count = 0.0, 0
    for lo in range(0, x.shape[0], batch_size):
        sl = slice(lo, lo + batch_size)
        pred, _ = sfno.forward(params, x[sl], grid)
        _, t, n = _loss_terms(pred, y[sl], mask[sl])
        total += t
        count += n
    return total / count


def train(cubes, cfg: TrainConfig, model_cfg: sfno.OperatorConfig) -> TrainResult:
    """Teacher-forced training with best-validation checkpoint selection.

    The last ``val_fraction`` of the cubes (chronological order) is held out
    for checkpoint selection; when that carve-out is empty the training data
    doubles as validation. Normalization bounds come from the cubes actually
    trained on. Fully deterministic given (data, config, seed).
    """
    cubes = list(cubes)
    if not cubes:
        raise ValueError("empty dataset")
    if model_cfg.out_channels != cfg.horizon:
        raise ValueError(
            f"model emits {model_cfg.out_channels} channels but horizon is {cfg.horizon}"
        )
    grid = cubes[0].grid
    n_val = int(len(cubes) * cfg.val_fraction)
    train_cubes = cubes[: len(cubes) - n_val]
    val_cubes = cubes[len(cubes) - n_val :] or train_cubes

    bounds = NormBounds.from_cubes(train_cubes)
    def windows(cs):
        out = []
        for c in cs:
            out.extend(
                make_teacher_forced_samples(
                    normalize(c.values, bounds), cfg.horizon, cfg.every_index_windows
                )
            )
        return _stack_samples(out)

    x_tr, y_tr, m_tr = windows(train_cubes)
    x_va, y_va, m_va = windows(val_cubes)

    params = sfno.init_params(model_cfg)
    leaves = sfno.param_leaves(params)
    state = AdamState.for_leaves(leaves)
    rng = np.random.default_rng(cfg.seed)

    history = []
    best_val = np.inf
    best_epoch = -1
    best_leaves = [a.copy() for a in leaves]

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(x_tr.shape[0])
        total, count = 0.0, 0
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            pred, tape = sfno.forward(params, x_tr[idx], grid, record=True)
            loss, grad, t, n = _loss_with_grad_terms(pred, y_tr[idx], m_tr[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, "non-finite training loss")
            total += t
            count += n
            grads, _ = sfno.backward(params, tape, grad)
            leaves = adam_step(leaves, grads, state, cfg)
            params = sfno.params_from_leaves(model_cfg, leaves)
        train_loss = total / count
        val_loss = _eval_loss(params, grid, x_va, y_va, m_va, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "non-finite validation loss")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_leaves = [a.copy() for a in leaves]

    best_params = sfno.params_from_leaves(model_cfg, best_leaves)
    return TrainResult(
        params=best_params,
        bounds=bounds,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
    )


# ----------------------------------------------------------------------------
# cross-validation harness
# ----------------------------------------------------------------------------

@dataclass
class CrossValResult:
    fold_mse: np.ndarray  # (n_configs, n_folds)
    mean_mse: np.ndarray  # (n_configs,)
    selected: int

    @property
    def selected_fold_mse(self):
        return self.fold_mse[self.selected]


def cross_validate(cubes, candidate_configs, cfg: TrainConfig, shuffle: bool = False) -> CrossValResult:
    """K-fold selection by held-out rollout MSE (physical units).

    Folds are contiguous in chronological order by default; ``shuffle``
    permutes with cfg.seed first. The config with the lowest mean MSE wins.
    """
    from .rollout import rollout  # local import: rollout depends on this module

    cubes = list(cubes)
    if len(cubes) < cfg.folds:
        raise ValueError(f"{len(cubes)} cubes cannot fill {cfg.folds} folds")
    order = np.arange(len(cubes))
    if shuffle:
        order = np.random.default_rng(cfg.seed).permutation(order)
    folds = np.array_split(order, cfg.folds)

    table = np.empty((len(candidate_configs), cfg.folds))
    for ci, model_cfg in enumerate(candidate_configs):
        for fi, hold in enumerate(folds):
            hold_set = set(int(i) for i in hold)
            train_cubes = [cubes[i] for i in order if int(i) not in hold_set]
            result = train(train_cubes, cfg, model_cfg)
            errs = []
            for i in hold:
                truth = cubes[int(i)]
                pred = rollout(
                    result.params, truth.slices[0], cfg.horizon, result.bounds, truth.rgrid
                )
                errs.append(float(np.mean((pred.values[1:] - truth.values[1:]) ** 2)))
            table[ci, fi] = np.mean(errs)
    mean = table.mean(axis=1)
    return CrossValResult(fold_mse=table, mean_mse=mean, selected=int(np.argmin(mean)))
