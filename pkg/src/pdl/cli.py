"""Command-line entry point: ``pdl <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 degenerate computation.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_kv, to_kv
from .data import DataConfig, Dataset, DegenerateViewError, generate_dataset, load_dataset, save_dataset
from .diffusion import GuidanceSchedule, SamplerConfig, Trajectory
from .evaluate import (THRESHOLD_KEYS, AggregationConfig, AggregationDegenerateError, decode_batch,
                       evaluate_mean_pool, evaluate_single, map_table, mode_stats, sample_states)
from .export import export_rotation_distribution, export_trajectory_errors
from .geometry import DegenerateRotationError, Pose
from .models import ModelConfig, PoseNet, centroids, init_params
from .optim import FormatError, load_checkpoint
from .tensor import ContractError, ShapeError
from .train import NonFiniteLossError, TrainConfig, run_training

log = logging.getLogger("pdl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEGENERATE = 0, 1, 2, 3
SCHEDULES = ("none", "constant", "linear", "exponential")
MODEL_CFG_NAME = "model.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--guidance", choices=SCHEDULES, default="exponential")
    p.add_argument("--wmin", type=float, default=1.0)
    p.add_argument("--wmax", type=float, default=4.0)
    p.add_argument("--k", type=int)
    p.add_argument("--delta", type=float, default=60.0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--sampler", choices=("euler", "ddim"), default="euler")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="use only the first N records of the dataset")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "write train/val/test dataset files",
        "pretrain": "fit encoder + regression head",
        "train-joint": "joint regression + score-matching training from a pretrain checkpoint",
        "train-scratch": "score-matching only, random encoder init",
        "sample": "sampling trajectories for dataset records",
        "eval": "mAP table for guided, unguided and mean-pool inference",
        "export-dist": "rotation-distribution exports for symmetric records",
        "compare-schedules": "mAP for each guidance schedule",
    }
    for name, h in helps.items():
        _common(sub.add_parser(name, help=h))
    return parser


# -- helpers -------------------------------------------------------------------

def _need(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError("missing required flag(s): " + " ".join("--" + m for m in missing))


def _sampler(args, kind: str | None = None) -> SamplerConfig:
    g = GuidanceSchedule(kind or args.guidance, args.wmin, args.wmax)
    return SamplerConfig(method="euler_ode" if args.sampler == "euler" else "ddim", num_steps=args.steps,
                         eta=args.eta, guidance=g, seed=args.seed)


def _model_cfg(args) -> ModelConfig:
    if args.checkpoint is not None and (args.checkpoint.parent / MODEL_CFG_NAME).exists():
        return load_kv(ModelConfig, args.checkpoint.parent / MODEL_CFG_NAME)
    return load_kv(ModelConfig, args.config)


def _load_net(args) -> PoseNet:
    _need(args, "checkpoint")
    cfg = _model_cfg(args)
    net = PoseNet(cfg, init_params(cfg, np.random.default_rng(0)))
    load_checkpoint(args.checkpoint, net.params, strict=True)
    return net


def _dataset(args, split: str = "test") -> Dataset:
    _need(args, "data")
    path = args.data / f"{split}.bin" if args.data.is_dir() else args.data
    ds = load_dataset(path)
    if args.limit is not None:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    return ds


def _table(rows: list[tuple[str, dict]], out: Path | None, name: str) -> str:
    width = max(len(r[0]) for r in rows)
    lines = [f"{'method':<{width}}  " + "  ".join(f"{k:>9}" for k in THRESHOLD_KEYS)]
    for label, m in rows:
        lines.append(f"{label:<{width}}  " + "  ".join(f"{m[k]:9.2f}" for k in THRESHOLD_KEYS))
    text = "\n".join(lines)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method",) + THRESHOLD_KEYS)
        for label, m in rows:
            w.writerow([label] + [repr(float(m[k])) for k in THRESHOLD_KEYS])
        (out / name).write_text(buf.getvalue())
    return text


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _need(args, "out")
    cfg = load_kv(DataConfig, args.config, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "data.cfg").write_text(cfg.to_text())
    for split in ("train", "val", "test"):
        ds = generate_dataset(cfg, split)
        save_dataset(args.out / f"{split}.bin", ds)
        print(f"{split}: {len(ds)} records -> {args.out / f'{split}.bin'}")
    return EXIT_OK


def cmd_train(args, mode: str) -> int:
    _need(args, "data", "out")
    overrides = {"mode": mode, "seed": args.seed}
    if mode == "joint" and args.checkpoint is not None:
        overrides["init_checkpoint"] = str(args.checkpoint)
    tcfg = load_kv(TrainConfig, args.config, **overrides)
    mcfg = load_kv(ModelConfig, args.config)
    train = load_dataset(args.data / "train.bin")
    val_path = args.data / "val.bin"
    val = load_dataset(val_path) if val_path.exists() else None
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / MODEL_CFG_NAME).write_text(to_kv(mcfg))
    (args.out / "train.cfg").write_text(to_kv(tcfg))
    res = run_training(train, tcfg, mcfg, val=val, out_dir=args.out)
    last = res.log[-1] if res.log else None
    print(f"checkpoint: {res.checkpoint}")
    if last is not None:
        print(f"final epoch {last['epoch']}: loss_reg {last['loss_reg']:.6f} loss_dsm {last['loss_dsm']:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    _need(args, "out")
    net, ds = _load_net(args), _dataset(args)
    k = args.k or 1
    scfg = _sampler(args)
    feats = net.features(ds.points)
    path = sample_states(net, feats, scfg, np.random.default_rng(args.seed), k, keep_path=True)
    ts = scfg.time_grid()
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        gt = ds.pose(i)
        cen = centroids(ds.points[i])
        trajs = []
        for j in range(k):
            states = path[:, i, j]
            trajs.append(Trajectory(ts, states, None))
            _write_state_csv(args.out / f"traj_{i:04d}_{j:03d}.csv", ts, states, cen, net.cfg.trans_scale,
                             gt, bool(ds.symmetric[i]))
        bands = export_trajectory_errors(trajs, gt, args.out / f"errors_{i:04d}.csv", bool(ds.symmetric[i]),
                                         cen, net.cfg.trans_scale)
        b = bands["run"]
        rows.append((i, b.rot_mean[-1], b.trans_mean[-1]))
    for i, r, t in rows:
        print(f"record {i}: final rot_err {np.degrees(r):.3f} deg, trans_err {100 * t:.3f} cm")
    return EXIT_OK


def _write_state_csv(path: Path, ts, states, centroid, trans_scale, gt: Pose, symmetric: bool) -> None:
    from .evaluate import batch_errors
    R, t, ok = decode_batch(states, centroid, trans_scale)
    rot, trans = batch_errors(R, t, gt.rotation, gt.translation, symmetric)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(1, 10)] + ["rot_err_rad", "trans_err_m"])
        for ti, x, r, tr in zip(ts, states, rot, trans):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in x] + [repr(float(r)), repr(float(tr))])


def cmd_eval(args) -> int:
    net, ds = _load_net(args), _dataset(args)
    feats = net.features(ds.points)
    rows = []
    if args.guidance != "none":
        rot, trans = evaluate_single(net, ds, _sampler(args), np.random.default_rng(args.seed), feats)
        rows.append((f"single {args.guidance}({args.wmin:g},{args.wmax:g})", map_table(rot, trans)))
    rot, trans = evaluate_single(net, ds, _sampler(args, "none"), np.random.default_rng(args.seed), feats)
    rows.append(("single unguided", map_table(rot, trans)))
    k = 50 if args.k is None else args.k
    if k > 1:
        agg = AggregationConfig(k, args.delta)
        rot, trans = evaluate_mean_pool(net, ds, _sampler(args, "none"), agg, np.random.default_rng(args.seed),
                                        feats)
        rows.append((f"mean-pool unguided K={k} delta={args.delta:g}", map_table(rot, trans)))
    print(_table(rows, args.out, "eval.csv"))
    return EXIT_OK


def cmd_export_dist(args) -> int:
    _need(args, "out")
    net, ds = _load_net(args), _dataset(args)
    idx = np.flatnonzero(ds.symmetric)
    if len(idx) == 0:
        raise FormatError("dataset has no symmetric records", 0)
    sub = ds.subset(idx)
    k = args.k or 50
    scfg = _sampler(args)
    states = sample_states(net, net.features(sub.points), scfg, np.random.default_rng(args.seed), k)
    R, t, ok = decode_batch(states, centroids(sub.points)[:, None, :], net.cfg.trans_scale)
    args.out.mkdir(parents=True, exist_ok=True)
    for n, i in enumerate(idx):
        gt = ds.pose(int(i))
        Rs = R[n][ok[n]]
        if len(Rs) == 0:
            raise DegenerateRotationError(f"record {i}: every sample degenerate")
        export_rotation_distribution(Rs, gt, args.out / f"dist_{int(i):04d}.csv")
        if len(Rs) >= 2:
            ms = mode_stats(Rs, gt)
            spread = "uniform" if ms.uniform else f"{np.degrees(ms.circular_std):.2f} deg"
            print(f"record {int(i)}: yaw spread {spread}, off-axis mean "
                  f"{np.degrees(np.mean(ms.off_axis)):.3f} deg")
    return EXIT_OK


def cmd_compare(args) -> int:
    net, ds = _load_net(args), _dataset(args)
    feats = net.features(ds.points)
    rows = []
    for kind in SCHEDULES:
        rot, trans = evaluate_single(net, ds, _sampler(args, kind), np.random.default_rng(args.seed), feats)
        rows.append((kind, map_table(rot, trans)))
    print(_table(rows, args.out, "schedules.csv"))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": lambda a: cmd_train(a, "pretrain"),
    "train-joint": lambda a: cmd_train(a, "joint"),
    "train-scratch": lambda a: cmd_train(a, "scratch"),
    "sample": cmd_sample,
    "eval": cmd_eval,
    "export-dist": cmd_export_dist,
    "compare-schedules": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        if str(exc).startswith("missing"):
            print(f"pdl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    # degenerate errors subclass ValueError, so they are matched first
    except (DegenerateRotationError, DegenerateViewError, AggregationDegenerateError, NonFiniteLossError,
            ContractError) as exc:
        print(f"pdl: degenerate computation: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (FormatError, ShapeError, FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        print(f"pdl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
