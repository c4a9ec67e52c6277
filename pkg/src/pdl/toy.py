"""Desk-scale benchmark recipe: dataset sizes, model widths and training
schedules that fit a single CPU in well under an hour.

``build`` is idempotent: finished stages found in ``root`` are reused.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import to_kv
from .data import DataConfig, Dataset, generate_dataset, load_dataset, save_dataset
from .models import ModelConfig, PoseNet, init_params
from .optim import load_checkpoint
from .train import TrainConfig, run_training

log = logging.getLogger(__name__)

TOY_MODEL = ModelConfig(enc_widths=(32, 64, 128), reg_hidden=(128, 128), time_dim=64, pose_dim=128,
                        trunk_hidden=(512, 512))


@dataclass
class ToyRecipe:
    data: DataConfig = field(default_factory=lambda: DataConfig(train_per_category=500, val_per_category=25,
                                                                test_per_category=200))
    model: ModelConfig = TOY_MODEL
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="pretrain", epochs=40, batch_size=64, base_lr=1e-3, warmup_steps=50, decay_every=200, val_every=5))
    diffusion: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="scratch", epochs=60, batch_size=32, base_lr=2e-3, warmup_steps=50, decay_every=200,
        noise_draws=16, val_every=5))

    def joint_config(self, init: str | Path, **kw) -> TrainConfig:
        return replace(self.diffusion, mode="joint", init_checkpoint=str(init), **kw)

    def scratch_config(self, **kw) -> TrainConfig:
        return replace(self.diffusion, mode="scratch", **kw)


def splits(recipe: ToyRecipe, root: str | Path) -> dict[str, Dataset]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = {}
    for split in ("train", "val", "test"):
        path = root / f"{split}.bin"
        if not path.exists():
            save_dataset(path, generate_dataset(recipe.data, split))
        out[split] = load_dataset(path)
    (root / "data.cfg").write_text(recipe.data.to_text())
    return out


def load_net(cfg: ModelConfig, ckpt: str | Path) -> PoseNet:
    net = PoseNet(cfg, init_params(cfg, np.random.default_rng(0)))
    load_checkpoint(ckpt, net.params)
    return net


def train_stage(recipe: ToyRecipe, cfg: TrainConfig, data: dict[str, Dataset], out: Path,
                on_epoch=None, reuse: bool = True) -> Path:
    """Run one stage into ``out`` unless a finished checkpoint is already there."""
    ckpt = out / "model.ckpt"
    if reuse and ckpt.exists() and (out / "done").exists():
        return ckpt
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.cfg").write_text(to_kv(recipe.model))
    (out / "train.cfg").write_text(to_kv(cfg))
    run_training(data["train"], cfg, recipe.model, val=data["val"], out_dir=out, on_epoch=on_epoch)
    (out / "done").write_text("")
    return ckpt


def build(root: str | Path, recipe: ToyRecipe | None = None, seed: int = 0) -> tuple[PoseNet, dict[str, Dataset]]:
    """Data, pretraining and joint training for one seed; returns the joint model."""
    recipe = recipe or ToyRecipe()
    root = Path(root)
    data = splits(recipe, root / "data")
    pre = train_stage(recipe, replace(recipe.pretrain, seed=seed), data, root / f"pretrain_s{seed}")
    joint = train_stage(recipe, recipe.joint_config(pre, seed=seed), data, root / f"joint_s{seed}")
    return load_net(recipe.model, joint), data
