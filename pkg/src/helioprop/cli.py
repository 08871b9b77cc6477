"""Batch command-line front end.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``rollout``, ``eval``,
``plot``. Plots are emitted as data files (PGM heatmaps, CSV histograms and
error curves) rather than rendered images. ``--config FILE`` loads flag
defaults from JSON; explicit flags win. The environment variable
HELIOPROP_THREADS caps BLAS parallelism (applied before numpy is imported,
so it only works when this module is the process entry point).

Heavy imports are deferred into the command handlers on purpose.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads() -> None:
    n = os.environ.get("HELIOPROP_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _fail(msg: str, code: int = 1) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_gen(args) -> int:
    from . import dataio

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .hux import HuxConfig

    cfg = dataio.SynthConfig(
        n_cubes=args.n,
        seed=args.seed,
        v_slow=args.v_slow,
        v_fast=args.v_fast,
        nr=args.nr,
        nlat=args.nlat,
        nlon=args.nlon,
        hux=HuxConfig(alpha=args.alpha),
    )
    cubes = dataio.generate_dataset(cfg)
    paths = []
    for i, cube in enumerate(cubes):
        p = out_dir / f"cube_{i:04d}.hwc"
        dataio.save_cube(cube, p)
        paths.append(p.name)
    dataio.write_manifest(out_dir / "manifest.json", paths, cfg)
    print(f"wrote {len(cubes)} cubes + manifest.json to {out_dir}")
    return 0


def cmd_train(args) -> int:
    from . import dataio, sfno, training

    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        return _fail(f"manifest not found: {manifest_path}", 2)
    doc = dataio.read_manifest(manifest_path)
    base = manifest_path.parent
    cubes = [dataio.load_cube(base / e["path"]) for e in doc["cubes"]]
    if not cubes:
        return _fail("manifest lists no cubes", 2)

    grid = cubes[0].grid
    model_cfg = sfno.OperatorConfig(
        n_layers=args.layers,
        hidden_channels=args.channels,
        out_channels=args.horizon,
        lmax=args.lmax if args.lmax is not None else grid.nlat - 1,
        mmax=args.mmax if args.mmax is not None else grid.nlon // 2,
        seed=args.seed,
    )
    train_cfg = training.TrainConfig(
        epochs=args.epochs,
        horizon=args.horizon,
        learning_rate=args.lr,
        batch_size=args.batch,
        seed=args.seed,
    )
    try:
        result = training.train(cubes, train_cfg, model_cfg)
    except training.TrainingDivergedError as exc:
        return _fail(str(exc), 3)
    dataio.save_checkpoint(args.out, result.params, result.bounds)
    dataio.write_loss_history_csv(args.loss_csv, result.history)
    last = result.history[-1]
    print(
        f"trained {args.layers}x{args.channels} for {args.epochs} epochs "
        f"(horizon {args.horizon}); final train={last[1]:.6g} val={last[2]:.6g}; "
        f"best epoch {result.best_epoch}; checkpoint {args.out}"
    )
    return 0


def cmd_rollout(args) -> int:
    from . import dataio
    from .rollout import RolloutDivergedError, rollout

    try:
        params, bounds = dataio.load_checkpoint(args.checkpoint)
    except (OSError, dataio.FormatError) as exc:
        return _fail(f"cannot read checkpoint: {exc}", 2)
    if bounds is None:
        return _fail("checkpoint carries no normalization bounds", 2)
    truth = dataio.load_cube(args.boundary)
    horizon = args.horizon if args.horizon is not None else params.cfg.out_channels
    try:
        cube = rollout(params, truth.slices[0], horizon, bounds, truth.rgrid)
    except (RolloutDivergedError, ValueError) as exc:
        return _fail(str(exc), 3)
    dataio.save_cube(cube, args.out)
    print(f"rolled out {cube.nr} slices (horizon {horizon}) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from . import dataio, metrics
    from .hux import HuxConfig, hux_forward
    from .sphere_grid import VelocityMap

    truth = dataio.load_cube(args.truth)
    if args.hux:
        boundary = VelocityMap(truth.grid, truth.values[0])
        # synthetic truth already carries the boundary boost in slice 0;
        # --hux-accelerate re-applies it for raw external boundaries
        cfg = HuxConfig(alpha=args.alpha, apply_acceleration=args.hux_accelerate)
        pred = hux_forward(boundary, truth.rgrid, cfg)
        name = "hux-f"
    elif args.pred:
        pred = dataio.load_cube(args.pred)
        name = str(args.pred)
    else:
        return _fail("need --pred or --hux", 2)

    if pred.grid.shape != truth.grid.shape or pred.nr != truth.nr:
        return _fail(
            f"grid mismatch: pred {(pred.nr,) + pred.grid.shape} "
            f"vs truth {(truth.nr,) + truth.grid.shape}", 3
        )
    cfg = metrics.MetricsConfig(edge=metrics.EdgeMaskConfig(args.edge_threshold))
    report = metrics.evaluate_cube(pred, truth, cfg, meta={"pred": name, "truth": str(args.truth)})
    metrics.write_report_json(report, args.report)
    metrics.write_report_csv({name: report}, args.csv)
    print(
        f"mse={report.mean_mse:.6g} edge_mse={report.mean_edge_mse:.6g} "
        f"emd={report.mean_emd:.6g} uiqi={report.mean_uiqi:.6g} -> {args.report}"
    )
    return 0


def _write_pgm(path, values) -> None:
    import numpy as np

    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    pix = np.zeros(v.shape, dtype=np.int64) if hi == lo else np.rint(
        (v - lo) / (hi - lo) * 255.0
    ).astype(np.int64)
    with open(path, "w") as fh:
        fh.write(f"P2\n{v.shape[1]} {v.shape[0]}\n255\n")
        for row in pix:
            fh.write(" ".join(str(int(p)) for p in row) + "\n")


def cmd_plot(args) -> int:
    import numpy as np

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []

    if args.cube:
        from . import dataio

        cube = dataio.load_cube(args.cube)
        for idx in args.radius or [0, cube.nr // 2, cube.nr - 1]:
            if not (0 <= idx < cube.nr):
                return _fail(f"radius index {idx} outside [0, {cube.nr - 1}]", 2)
            p = out_dir / f"slice_{idx:04d}.pgm"
            _write_pgm(p, cube.values[idx])
            wrote.append(p.name)
        counts, edges = np.histogram(cube.values.ravel(), bins=args.bins)
        p = out_dir / "histogram.csv"
        with open(p, "w") as fh:
            fh.write("bin_left,bin_right,count\n")
            for i, c in enumerate(counts):
                fh.write(f"{edges[i]!r},{edges[i + 1]!r},{int(c)}\n")
        wrote.append(p.name)

    if args.report:
        with open(args.report) as fh:
            doc = json.load(fh)
        per = doc["per_slice"]
        p = out_dir / "error_vs_radius.csv"
        with open(p, "w") as fh:
            fh.write("slice_index,mse,edge_mse,emd,uiqi\n")
            for i in range(doc["n_slices"]):
                em = per["edge_mse"][i]
                fh.write(
                    f"{i + 1},{per['mse'][i]!r},{'' if em is None else repr(em)},"
                    f"{per['emd'][i]!r},{per['uiqi'][i]!r}\n"
                )
        wrote.append(p.name)

    if not wrote:
        return _fail("nothing to plot: give --cube and/or --report", 2)
    print(f"wrote {', '.join(wrote)} to {out_dir}")
    return 0


def _apply_config_defaults(parser: argparse.ArgumentParser, argv) -> list[str]:
    """Pull defaults from a --config JSON file, keeping explicit flags dominant."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        cfg_path = argv[i + 1]
    except IndexError:
        parser.error("--config needs a file argument")
    with open(cfg_path) as fh:
        defaults = json.load(fh)
    parser.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    return argv[:i] + argv[i + 2 :]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="helioprop",
        description="Solar-wind velocity surrogate pipeline: generate, train, roll out, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of cubes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--v-slow", type=float, default=350.0)
    p.add_argument("--v-fast", type=float, default=750.0)
    p.add_argument("--alpha", type=float, default=0.15, help="acceleration amplitude")
    p.add_argument("--nr", type=int, default=140)
    p.add_argument("--nlat", type=int, default=111)
    p.add_argument("--nlon", type=int, default=128)
    p.add_argument("--config", help="JSON file of flag defaults")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the spectral operator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, default=8e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lmax", type=int, default=None, help="default: grid nlat - 1")
    p.add_argument("--mmax", type=int, default=None, help="default: grid nlon / 2")
    p.add_argument("--out", default="model.sfnp")
    p.add_argument("--loss-csv", default="loss_history.csv")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="autoregressive prediction from a boundary slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--boundary", required=True, help="cube file; slice 0 is used")
    p.add_argument("--horizon", type=int, default=None, help="default: checkpoint horizon")
    p.add_argument("--out", default="prediction.hwc")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="metrics report, optionally against the upwind baseline")
    p.add_argument("--pred", default=None)
    p.add_argument("--truth", required=True)
    p.add_argument("--hux", action="store_true",
                   help="march the truth's boundary instead of loading --pred")
    p.add_argument("--hux-accelerate", action="store_true",
                   help="boost the boundary before marching (off: slice 0 is already boosted)")
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--edge-threshold", type=float, default=0.2)
    p.add_argument("--report", default="report.json")
    p.add_argument("--csv", default="report_summary.csv")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="emit PGM heatmaps and CSV curves")
    p.add_argument("--cube", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--radius", type=int, action="append",
                   help="slice index for heatmaps; repeatable")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out-dir", default="plots")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
