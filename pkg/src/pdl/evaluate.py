"""Pose metrics, candidate aggregation, symmetry diagnostics and batched inference."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import GuidanceSchedule, SamplerConfig, integrate
from .geometry import DEGENERATE_TOL, Pose, project_to_so3, rotation_error, y_axis_distance
from .models import centroids, regress
from .tensor import ContractError, Tensor

THRESHOLDS = ((5.0, 2.0), (10.0, 2.0), (10.0, 5.0))
THRESHOLD_KEYS = ("map_5_2", "map_10_2", "map_10_5")


class AggregationDegenerateError(RuntimeError):
    """Candidate rotations cancel out, so their chordal mean has no unique projection."""

    def __init__(self, msg: str, candidates: Sequence[Pose] = ()):
        super().__init__(msg)
        self.candidates = list(candidates)


@dataclass(frozen=True)
class ErrorPair:
    rot_err: float  # radians
    trans_err: float  # meters


def pose_error(pred: Pose, gt: Pose, symmetric: bool = False) -> ErrorPair:
    return ErrorPair(float(rotation_error(pred.rotation, gt.rotation, symmetric)),
                     float(np.linalg.norm(pred.translation - gt.translation)))


def map_at(results, n_deg: float, m_cm: float) -> float:
    """Percentage of results with rotation error <= n degrees and translation <= m cm.

    ``results`` is a sequence of :class:`ErrorPair` or a ``(rot_errs, trans_errs)`` pair.
    """
    rot, trans = _as_error_arrays(results)
    if rot.size == 0:
        raise ValueError("map_at needs at least one result")
    ok = (rot <= math.radians(n_deg) + 1e-12) & (trans <= m_cm / 100.0 + 1e-12)
    return 100.0 * float(np.mean(ok))


def _as_error_arrays(results) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(results, tuple) and len(results) == 2 and not isinstance(results[0], ErrorPair):
        return np.asarray(results[0], dtype=float), np.asarray(results[1], dtype=float)
    results = list(results)
    return (np.array([r.rot_err for r in results], dtype=float),
            np.array([r.trans_err for r in results], dtype=float))


def map_table(rot_errs, trans_errs) -> dict[str, float]:
    return {k: map_at((rot_errs, trans_errs), n, m) for k, (n, m) in zip(THRESHOLD_KEYS, THRESHOLDS)}


# -- aggregation ---------------------------------------------------------------

@dataclass(frozen=True)
class AggregationConfig:
    k: int = 50
    delta: float = 60.0  # percent of candidates kept, chosen at random

    def __post_init__(self):
        if self.k < 1 or not 0.0 < self.delta <= 100.0:
            raise ValueError(f"invalid aggregation config k={self.k}, delta={self.delta}")

    @property
    def retained(self) -> int:
        return max(1, math.ceil(self.k * self.delta / 100.0 - 1e-9))


def chordal_mean(rotations: np.ndarray) -> np.ndarray:
    M = np.mean(np.asarray(rotations), axis=0)
    s = np.linalg.svd(M, compute_uv=False)
    if s[1] < 1e-9:
        raise AggregationDegenerateError(f"chordal mean is rank-deficient (singular values {s})")
    return project_to_so3(M)


def aggregate_mean_pool(candidates: Sequence[Pose], cfg: AggregationConfig,
                        rng: np.random.Generator) -> Pose:
    """Mean-pool a random ``delta`` percent of the candidates (no ranking)."""
    if len(candidates) != cfg.k:
        raise ContractError(f"expected {cfg.k} candidates, got {len(candidates)}")
    keep = rng.choice(cfg.k, size=cfg.retained, replace=False) if cfg.retained < cfg.k else np.arange(cfg.k)
    keep = np.sort(keep)
    Rs = np.stack([candidates[i].rotation for i in keep])
    ts = np.stack([candidates[i].translation for i in keep])
    if np.all(Rs == Rs[0]):
        R = Rs[0].copy()
    else:
        try:
            R = chordal_mean(Rs)
        except AggregationDegenerateError as exc:
            raise AggregationDegenerateError(str(exc), candidates) from None
    # offsets from the first candidate keep identical inputs bit-exact
    return Pose(R, ts[0] + (ts - ts[0]).mean(axis=0))


# -- symmetry diagnostics ------------------------------------------------------

@dataclass(frozen=True)
class ModeStats:
    yaw: np.ndarray  # free angle about the symmetry axis, radians
    circular_mean: float
    resultant_length: float
    circular_std: float  # inf when the angles look uniform
    uniform: bool
    off_axis: np.ndarray  # y-axis misalignment per sample, radians


UNIFORM_RESULTANT = 0.1


def twist_about_y(Q: np.ndarray) -> np.ndarray:
    """Twist angle about y of relative rotation(s) ``Q`` (swing-twist split).

    Equals ``2 * atan2(q_y, q_w)`` of the quaternion, written in matrix terms.
    """
    Q = np.asarray(Q)
    return np.arctan2(Q[..., 0, 2] - Q[..., 2, 0], Q[..., 0, 0] + Q[..., 2, 2])


def mode_stats(samples: Sequence[Pose] | np.ndarray, gt: Pose, symmetry: str = "y_continuous") -> ModeStats:
    if symmetry == "none":
        raise ContractError("mode statistics are only defined for symmetric objects")
    Rs = np.asarray([p.rotation for p in samples]) if not isinstance(samples, np.ndarray) else samples
    if len(Rs) < 2:
        raise ContractError("mode statistics need at least two samples")
    Q = np.einsum("ji,njk->nik", gt.rotation, Rs)
    yaw = np.angle(np.exp(1j * twist_about_y(Q)))
    z = np.mean(np.exp(1j * yaw))
    rbar = float(np.abs(z))
    uniform = rbar < UNIFORM_RESULTANT
    std = math.inf if uniform else float(np.sqrt(max(0.0, -2.0 * np.log(min(rbar, 1.0)))))
    return ModeStats(yaw, float(np.angle(z)), rbar, std, uniform,
                     np.asarray(y_axis_distance(Rs, gt.rotation[None])))


# -- batched inference ---------------------------------------------------------

def decode_batch(states: np.ndarray, centroids: np.ndarray, trans_scale: float):
    """Model-space 9-vectors to ``(R, t, ok)``; degenerate rows get ``ok=False``."""
    v = np.asarray(states, dtype=np.float64)
    a1, a2 = v[..., 0:3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / np.maximum(n1, DEGENERATE_TOL)
    r = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(r, axis=-1, keepdims=True)
    b2 = r / np.maximum(n2, DEGENERATE_TOL)
    ok = (n1[..., 0] >= DEGENERATE_TOL) & (n2[..., 0] >= DEGENERATE_TOL) & np.all(np.isfinite(v), axis=-1)
    R = np.stack([b1, b2, np.cross(b1, b2)], axis=-1)
    R[~ok] = np.eye(3)
    t = v[..., 6:9] / trans_scale + centroids
    t = np.where(ok[..., None], t, np.nan)
    return R, t, ok


def batch_errors(R, t, R_gt, t_gt, symmetric) -> tuple[np.ndarray, np.ndarray]:
    """Per-row errors; rows with non-finite translation count as failures (inf)."""
    rot = np.asarray(rotation_error(R, R_gt, symmetric), dtype=float)
    trans = np.linalg.norm(t - t_gt, axis=-1)
    bad = ~np.isfinite(trans)
    rot = np.where(bad, np.inf, rot)
    return rot, np.where(bad, np.inf, trans)


def worker_count() -> int:
    """Worker threads for batched sampling; ``PDL_THREADS`` overrides the CPU count."""
    env = os.environ.get("PDL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def sample_states(net, feats: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator, k: int = 1,
                  chunk: int = 4096, keep_path: bool = False, workers: int | None = None):
    """Run ``k`` sampler draws per condition row. Returns final states ``(M, k, 9)``
    (or the full path ``(steps + 1, M, k, 9)`` with ``keep_path``).

    Chunks get their own random streams, so results do not depend on ``workers``.
    """
    M = len(feats)
    rows = np.repeat(np.arange(M), k)
    sig = net.cfg.sched.sigma(cfg.t_start)
    x0 = sig * rng.standard_normal((M * k, 9))
    starts = list(range(0, M * k, chunk))
    seeds = rng.integers(0, 2 ** 63, size=len(starts))

    def run(j: int) -> np.ndarray:
        sl = slice(starts[j], starts[j] + chunk)
        _, st = integrate(net.score, feats[rows[sl]], cfg, x0[sl], np.random.default_rng(seeds[j]),
                          net.cfg.sched)
        return st if keep_path else st[-1]

    n_workers = min(worker_count() if workers is None else workers, len(starts))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            outs = list(pool.map(run, range(len(starts))))
    else:
        outs = [run(j) for j in range(len(starts))]
    if keep_path:
        return np.concatenate(outs, axis=1).reshape(cfg.num_steps + 1, M, k, 9)
    return np.concatenate(outs, axis=0).reshape(M, k, 9)


def predict_sampled(net, ds, cfg: SamplerConfig, rng: np.random.Generator, k: int = 1,
                    feats: np.ndarray | None = None):
    """Sampled candidates for every record: ``R (M, k, 3, 3)``, ``t (M, k, 3)``, ``ok``."""
    feats = net.features(ds.points) if feats is None else feats
    states = sample_states(net, feats, cfg, rng, k)
    cen = centroids(ds.points)[:, None, :]
    return decode_batch(states, cen, net.cfg.trans_scale)


def evaluate_single(net, ds, cfg: SamplerConfig, rng: np.random.Generator,
                    feats: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    R, t, ok = predict_sampled(net, ds, cfg, rng, 1, feats)
    return batch_errors(R[:, 0], t[:, 0], ds.rotations, ds.translations, ds.symmetric)


def evaluate_mean_pool(net, ds, cfg: SamplerConfig, agg: AggregationConfig, rng: np.random.Generator,
                       feats: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    R, t, ok = predict_sampled(net, ds, cfg, rng, agg.k, feats)
    rot, trans = np.empty(len(ds)), np.empty(len(ds))
    for i in range(len(ds)):
        cands = [Pose(R[i, j], t[i, j]) if ok[i, j] else None for j in range(agg.k)]
        if any(c is None for c in cands):
            rot[i] = trans[i] = np.inf
            continue
        try:
            p = aggregate_mean_pool(cands, agg, rng)
        except AggregationDegenerateError:
            rot[i] = trans[i] = np.inf
            continue
        rot[i] = float(rotation_error(p.rotation, ds.rotations[i], ds.symmetric[i]))
        trans[i] = float(np.linalg.norm(p.translation - ds.translations[i]))
    return rot, trans


def evaluate_regression(net, ds, feats: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    feats = net.features(ds.points) if feats is None else feats
    out = regress(Tensor(feats), net.params, net.cfg).data
    R, t, ok = decode_batch(out, centroids(ds.points), net.cfg.trans_scale)
    return batch_errors(R, t, ds.rotations, ds.translations, ds.symmetric)


def guided(kind: str = "exponential", w_min: float = 1.0, w_max: float = 4.0) -> GuidanceSchedule:
    return GuidanceSchedule(kind, w_min, w_max)
