"""Train the desk-scale model and tabulate mAP for regression, guided/unguided
single-sample inference under both samplers, and unguided mean pooling."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from _common import parse, recipe, write_csv
from pdl.diffusion import GuidanceSchedule, SamplerConfig
from pdl.evaluate import (THRESHOLD_KEYS, AggregationConfig, evaluate_mean_pool, evaluate_regression,
                          evaluate_single, map_table)
from pdl.toy import build


@dataclass
class Config:
    root: str = "runs/toy"
    seed: int = 0
    euler_steps: int = 50
    ddim_steps: tuple = (10, 500)
    pool_k: int = 50
    pool_delta: float = 60.0
    quick: bool = False


def main(cfg: Config) -> None:
    net, data = build(cfg.root, recipe(cfg.quick), cfg.seed)
    test = data["test"]
    feats = net.features(test.points)
    guided, plain = GuidanceSchedule("exponential", 1.0, 4.0), GuidanceSchedule("none")
    rows = [("regression", map_table(*evaluate_regression(net, test, feats)), 0.0)]
    runs = [(f"euler{cfg.euler_steps} {g.kind}", SamplerConfig("euler_ode", cfg.euler_steps, guidance=g))
            for g in (guided, plain)]
    runs += [(f"ddim{n} {g.kind}", SamplerConfig("ddim", n, guidance=g)) for n in cfg.ddim_steps for g in (guided, plain)]
    for label, sc in runs:
        t0 = time.perf_counter()
        m = map_table(*evaluate_single(net, test, sc, np.random.default_rng(cfg.seed), feats))
        rows.append((label, m, time.perf_counter() - t0))
    t0 = time.perf_counter()
    m = map_table(*evaluate_mean_pool(net, test, SamplerConfig("euler_ode", cfg.euler_steps, guidance=plain),
                                      AggregationConfig(cfg.pool_k, cfg.pool_delta), np.random.default_rng(cfg.seed),
                                      feats))
    rows.append((f"meanpool K{cfg.pool_k} euler{cfg.euler_steps} none", m, time.perf_counter() - t0))
    for label, m, dt in rows:
        print(f"{label:<32}" + "".join(f"{m[k]:8.1f}" for k in THRESHOLD_KEYS) + f"  {dt:6.1f}s")
    write_csv(Path(cfg.root) / "benchmark.csv", ("method",) + THRESHOLD_KEYS + ("seconds",),
              [(label, *(repr(m[k]) for k in THRESHOLD_KEYS), f"{dt:.2f}") for label, m, dt in rows])


if __name__ == "__main__":
    main(parse(Config, __doc__))
