"""Regression pre-training, joint regression + score-matching training, and the
diffusion-only baseline."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .data import Dataset
from .diffusion import GuidanceSchedule, SamplerConfig
from .evaluate import THRESHOLD_KEYS, evaluate_regression, evaluate_single, map_table
from .geometry import Pose, gs_columns_t, rotation_error, rotation_loss_t
from .models import ModelConfig, PoseNet, centroids, diffusion_trunk, encode, init_params, regress, \
    to_model_space
from .optim import AdamState, ParamStore, adam_step, load_checkpoint, lr_at, save_checkpoint
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_reg", "loss_dsm") + THRESHOLD_KEYS + ("seconds",)


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; the last good checkpoint was kept."""


@dataclass
class TrainConfig:
    mode: Literal["pretrain", "joint", "scratch"] = "pretrain"
    epochs: int = 100
    batch_size: int = 192
    base_lr: float = 1e-3
    warmup_steps: int = 500
    decay_rate: float = 0.98
    decay_every: int = 1000
    symmetric_loss: bool = True
    checkpoint_every: int = 0
    seed: int = 0
    t_end: float = 1e-3
    noise_draws: int = 1  # (t, noise) pairs per cloud per step; all share one encoder pass
    init_checkpoint: str | None = None
    allow_no_init: bool = False
    val_every: int = 1
    val_steps: int = 50
    val_sampler: str = "euler_ode"
    log_seconds: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.noise_draws < 1:
            raise ValueError("noise_draws must be >= 1")
        if self.mode not in ("pretrain", "joint", "scratch"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "joint" and not self.init_checkpoint and not self.allow_no_init:
            raise ValueError("joint training needs init_checkpoint (or allow_no_init for ablations)")


@dataclass
class TrainResult:
    net: PoseNet
    adam: AdamState
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


# -- losses --------------------------------------------------------------------

def loss_regression(pred: Pose, gt: Pose, symmetric: bool = False) -> float:
    """Rotation distance (radians) plus squared translation distance (m^2)."""
    lr_ = float(rotation_error(pred.rotation, gt.rotation, symmetric))
    return lr_ + float(np.sum((pred.translation - gt.translation) ** 2))


def regression_loss_t(reg_out: Tensor, R_gt: np.ndarray, t_gt_model: np.ndarray,
                      symmetric: np.ndarray, trans_scale: float) -> Tensor:
    """Batch mean of the rotation angle loss plus squared metric translation error."""
    rot = rotation_loss_t(gs_columns_t(reg_out), R_gt, symmetric)
    dt = (reg_out[:, 6:9] - t_gt_model) * (1.0 / trans_scale)
    return rot.mean() + (dt * dt).sum(axis=1).mean()


def dsm_loss_t(trunk_out: Tensor, noise: np.ndarray) -> Tensor:
    """sigma^2-weighted DSM loss given the trunk's ``sigma * score`` output."""
    r = trunk_out + noise
    return (r * r).sum(axis=1).mean()


def batch_losses(net: PoseNet, points: np.ndarray, R_gt: np.ndarray, t_gt: np.ndarray,
                 symmetric: np.ndarray, mode: str, rng: np.random.Generator, t_end: float = 1e-3,
                 feature: Tensor | None = None, draws: int = 1) -> tuple[Tensor | None, Tensor | None]:
    """``(L_phi, L_theta)`` for one batch; the term not used by ``mode`` is ``None``.

    ``draws`` independent ``(t, noise)`` pairs are drawn per cloud and averaged.
    """
    cfg = net.cfg
    feat = encode(points, net.params, cfg) if feature is None else feature
    x0 = to_model_space(R_gt, t_gt, centroids(points), cfg)
    l_phi = l_theta = None
    if mode in ("pretrain", "joint"):
        l_phi = regression_loss_t(regress(feat, net.params, cfg), R_gt, x0[:, 6:9], symmetric,
                                  cfg.trans_scale)
    if mode in ("joint", "scratch"):
        B = len(points) * draws
        if draws > 1:
            rows = np.repeat(np.arange(len(points)), draws)
            feat, x0 = feat[rows], x0[rows]
        t = t_end + (1.0 - t_end) * (1.0 - rng.random(B))  # uniform on (t_end, 1]
        noise = rng.standard_normal((B, 9))
        xt = x0 + cfg.sched.sigma(t)[:, None] * noise
        l_theta = dsm_loss_t(diffusion_trunk(feat, xt, t, net.params, cfg), noise)
    return l_phi, l_theta


def trainable(params: ParamStore, mode: str) -> ParamStore:
    if mode == "pretrain":
        return params.subset("enc.").merge(params.subset("reg."))
    if mode == "scratch":
        return params.subset("enc.").merge(params.subset("diff."))
    return params


# -- loops ---------------------------------------------------------------------

def validate(net: PoseNet, val: Dataset | None, cfg: TrainConfig, mode: str) -> dict[str, float]:
    if val is None or len(val) == 0:
        return {k: float("nan") for k in THRESHOLD_KEYS}
    feats = net.features(val.points)
    if mode == "pretrain":
        rot, trans = evaluate_regression(net, val, feats)
    else:
        scfg = SamplerConfig(method=cfg.val_sampler, num_steps=cfg.val_steps, t_end=cfg.t_end,
                             guidance=GuidanceSchedule("exponential", 1.0, 4.0))
        rot, trans = evaluate_single(net, val, scfg, np.random.default_rng(cfg.seed + 7919), feats)
    return map_table(rot, trans)


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


class TrainLogWriter:
    """Append-only CSV; one flushed line per epoch."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, rec: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(rec[c]) for c in LOG_COLUMNS])


def run_training(train: Dataset, cfg: TrainConfig, model_cfg: ModelConfig, val: Dataset | None = None,
                 out_dir: str | Path | None = None, net: PoseNet | None = None,
                 on_epoch=None) -> TrainResult:
    """Shared loop for all three modes. ``on_epoch(rec)`` may return True to stop early."""
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = PoseNet(model_cfg, init_params(model_cfg, np.random.default_rng(cfg.seed)))
        if cfg.mode == "joint" and cfg.init_checkpoint:
            load_checkpoint_weights(net.params, cfg.init_checkpoint, prefixes=("enc.", "reg."))
    params = trainable(net.params, cfg.mode)
    adam = AdamState.for_params(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt" if out is not None else None
    writer = TrainLogWriter(out / "train_log.csv" if out is not None else None)
    last_good = net.params.arrays()
    n = len(train)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = {"reg": 0.0, "dsm": 0.0}
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            sym = train.symmetric[idx] if cfg.symmetric_loss else np.zeros(len(idx), bool)
            l_phi, l_theta = batch_losses(net, train.points[idx], train.rotations[idx],
                                          train.translations[idx], sym, cfg.mode, rng, cfg.t_end,
                                          draws=cfg.noise_draws)
            terms = [l for l in (l_phi, l_theta) if l is not None]
            total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
            if not np.isfinite(total.item()):
                net.params.load_arrays(last_good)
                if ckpt is not None:
                    save_checkpoint(ckpt, net.params)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            params.zero_grad()
            backward(total)
            adam_step(params, adam, lr_at(adam.step + 1, cfg.base_lr, cfg.warmup_steps,
                                          cfg.decay_rate, cfg.decay_every))
            w = len(idx) / n
            if l_phi is not None:
                sums["reg"] += w * l_phi.item()
            if l_theta is not None:
                sums["dsm"] += w * l_theta.item()
        last_good = net.params.arrays()
        maps = (validate(net, val, cfg, cfg.mode) if cfg.val_every and epoch % cfg.val_every == 0
                else {k: float("nan") for k in THRESHOLD_KEYS})
        rec = {"epoch": epoch, "loss_reg": sums["reg"], "loss_dsm": sums["dsm"], **maps,
               "seconds": time.perf_counter() - t0 if cfg.log_seconds else 0.0}
        records.append(rec)
        writer.append(rec)
        log.info("epoch %d reg %.4f dsm %.4f mAP10/5 %.1f", epoch, rec["loss_reg"], rec["loss_dsm"],
                 rec["map_10_5"])
        if ckpt is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, net.params, adam)
        if on_epoch is not None and on_epoch(rec):
            break
    if ckpt is not None:
        save_checkpoint(ckpt, net.params, adam)
    return TrainResult(net, adam, records, ckpt)


def load_checkpoint_weights(params: ParamStore, path: str | Path, prefixes=("enc.", "reg.", "diff.")) -> None:
    from .optim import read_arrays
    arrays = {k: v for k, v in read_arrays(path).items() if k.startswith(prefixes)}
    params.load_arrays(arrays)


def pretrain(train: Dataset, cfg: TrainConfig, model_cfg: ModelConfig, **kw) -> TrainResult:
    if cfg.mode != "pretrain":
        raise ValueError("pretrain needs mode=pretrain")
    return run_training(train, cfg, model_cfg, **kw)


def joint_train(train: Dataset, cfg: TrainConfig, model_cfg: ModelConfig, **kw) -> TrainResult:
    if cfg.mode != "joint":
        raise ValueError("joint_train needs mode=joint")
    return run_training(train, cfg, model_cfg, **kw)


def scratch_train(train: Dataset, cfg: TrainConfig, model_cfg: ModelConfig, **kw) -> TrainResult:
    if cfg.mode != "scratch":
        raise ValueError("scratch_train needs mode=scratch")
    return run_training(train, cfg, model_cfg, **kw)
