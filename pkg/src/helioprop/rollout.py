"""Autoregressive inference: predict H radii at a time, feed the last back.

Feedback stays in normalized space between steps (no denormalize/renormalize
round trip), and intermediate predictions are never clipped; divergence is
reported, not masked. The final step may overshoot the radial grid, in which
case the surplus slices are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sfno
from .sphere_grid import CubeMeta, RadialGrid, VelocityCube, VelocityMap
from .training import NormBounds, loss_l2_2d, make_teacher_forced_samples, normalize, denormalize


class RolloutDivergedError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite prediction at rollout step {step}")


def rollout_plan(nr: int, horizon: int) -> tuple[int, int, int]:
    """(n_steps, n_produced, n_discarded) needed to cover nr slices.

    nr - 1 slices must be predicted (slice 0 is the boundary); each step
    emits ``horizon`` of them, so the last step can overshoot.
    """
    if nr < 2 or horizon < 1:
        raise ValueError(f"invalid rollout plan request nr={nr}, horizon={horizon}")
    n_steps = -(-(nr - 1) // horizon)  # ceil
    produced = n_steps * horizon
    return n_steps, produced, produced - (nr - 1)


def rollout(
    params: sfno.OperatorParams,
    boundary: VelocityMap,
    horizon: int,
    bounds: NormBounds,
    rgrid: RadialGrid,
    meta: CubeMeta | None = None,
) -> VelocityCube:
    """Propagate a boundary map to a full cube of rgrid.nr slices."""
    cfg = params.cfg
    if cfg.out_channels != horizon:
        raise sfno.ShapeError(
            f"model emits {cfg.out_channels} slices per step, rollout asked for {horizon}"
        )
    grid = boundary.grid
    n_steps, _, _ = rollout_plan(rgrid.nr, horizon)

    x = normalize(boundary.values, bounds)[None, None]
    predicted = []
    for step in range(n_steps):
        y, _ = sfno.forward(params, x, grid)
        if not np.all(np.isfinite(y)):
            raise RolloutDivergedError(step)
        predicted.append(y[0])
        x = y[:, -1:]  # last predicted slice becomes the next input, still normalized
    stacked = np.concatenate(predicted, axis=0)[: rgrid.nr - 1]

    values = np.empty((rgrid.nr,) + grid.shape)
    values[0] = boundary.values
    values[1:] = denormalize(stacked, bounds)
    return VelocityCube(rgrid=rgrid, grid=grid, values=values, meta=meta or CubeMeta())


@dataclass
class TeacherEvalResult:
    """Per-window losses with ground-truth inputs vs. fed-back inputs."""

    window_starts: list[int]
    teacher_losses: np.ndarray
    closed_loop_losses: np.ndarray


def rollout_teacher_eval(
    params: sfno.OperatorParams,
    cube: VelocityCube,
    horizon: int,
    bounds: NormBounds,
) -> TeacherEvalResult:
    """Contrast one-step (teacher-forced) error with compounding rollout error."""
    cfg = params.cfg
    if cfg.out_channels != horizon:
        raise sfno.ShapeError(
            f"model emits {cfg.out_channels} slices per step, evaluation asked for {horizon}"
        )
    grid = cube.grid
    norm_values = normalize(cube.values, bounds)
    samples = make_teacher_forced_samples(norm_values, horizon)

    teacher = []
    closed = []
    x_closed = norm_values[0][None, None]
    for step, s in enumerate(samples):
        y_t, _ = sfno.forward(params, s.input[None, None], grid)
        teacher.append(loss_l2_2d(y_t, s.target[None], s.valid_mask[None]))
        y_c, _ = sfno.forward(params, x_closed, grid)
        if not np.all(np.isfinite(y_c)):
            raise RolloutDivergedError(step)
        closed.append(loss_l2_2d(y_c, s.target[None], s.valid_mask[None]))
        x_closed = y_c[:, -1:]
    return TeacherEvalResult(
        window_starts=[s.k for s in samples],
        teacher_losses=np.array(teacher),
        closed_loop_losses=np.array(closed),
    )
