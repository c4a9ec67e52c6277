"""Epochs for joint training (from a regression-pretrained encoder) and
scratch training to reach a validation mAP target, over several seeds."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

from _common import parse, recipe, write_csv
from pdl.toy import splits, train_stage


@dataclass
class Config:
    root: str = "runs/toy"
    seeds: tuple = (0, 1, 2)
    target: float = 60.0
    max_epochs: int = 60
    quick: bool = False


def epochs_to(rec, tcfg, data, out: Path, target: float):
    curve = []

    def on_epoch(row):
        curve.append(row["map_10_5"])
        return row["map_10_5"] >= target

    train_stage(rec, replace(tcfg, val_every=1), data, out, on_epoch=on_epoch, reuse=False)
    hit = next((i + 1 for i, v in enumerate(curve) if v >= target), math.inf)
    return hit, curve


def main(cfg: Config) -> None:
    rec = recipe(cfg.quick)
    rec = replace(rec, diffusion=replace(rec.diffusion, epochs=cfg.max_epochs))
    root = Path(cfg.root)
    data = splits(rec, root / "data")
    rows = []
    for seed in cfg.seeds:
        pre = train_stage(rec, replace(rec.pretrain, seed=seed), data, root / f"pretrain_s{seed}")
        j, jc = epochs_to(rec, rec.joint_config(pre, seed=seed), data, root / f"conv_joint_s{seed}", cfg.target)
        s, sc = epochs_to(rec, rec.scratch_config(seed=seed), data, root / f"conv_scratch_s{seed}", cfg.target)
        print(f"seed {seed}: joint {j} epochs (last {jc[-1]:.1f}), scratch {s} epochs (last {sc[-1]:.1f})")
        rows.append((seed, j, s))
    wins = sum(math.isfinite(j) and j <= s for _, j, s in rows)
    print(f"joint reached {cfg.target:g}% no later than scratch for {wins}/{len(rows)} seeds "
          f"(pretraining epochs excluded: {rec.pretrain.epochs})")
    write_csv(root / "convergence.csv", ("seed", "joint_epochs", "scratch_epochs"), rows)


if __name__ == "__main__":
    main(parse(Config, __doc__))
