"""Helpers shared by the experiment scripts: dataclass-to-argparse and a shrunken recipe for smoke runs."""
from __future__ import annotations

import argparse
import csv
import logging
from dataclasses import fields, replace
from pathlib import Path

from pdl.data import DataConfig
from pdl.toy import ToyRecipe


def parse(cls, description: str):
    """Every field of dataclass ``cls`` becomes a ``--flag`` with the field default."""
    p = argparse.ArgumentParser(description=description)
    for f in fields(cls):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=f.default)
        elif isinstance(f.default, tuple):
            p.add_argument(flag, type=int, nargs="+", default=list(f.default))
        else:
            p.add_argument(flag, type=type(f.default), default=f.default)
    args = vars(p.parse_args())
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in args.items()})


def recipe(quick: bool) -> ToyRecipe:
    r = ToyRecipe()
    if not quick:
        return r
    return replace(r, data=DataConfig(train_per_category=24, val_per_category=4, test_per_category=6, n_surface=1024),
                   pretrain=replace(r.pretrain, epochs=2, val_every=1),
                   diffusion=replace(r.diffusion, epochs=2, noise_draws=2, val_every=1, val_steps=5))


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
