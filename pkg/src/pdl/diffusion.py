"""Variance-exploding score diffusion over 9-vectors: schedules, samplers, oracles.

A *score field* is any callable ``field(x, t, condition) -> s`` taking a batch
``x`` of shape ``(B, 9)``, a scalar time and an opaque condition, and returning
the score with the same shape as ``x``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import numpy as np

from .geometry import DegenerateRotationError, Pose, pose_unpack, rotation_error

ScoreField = Callable[[np.ndarray, float, Any], np.ndarray]
GuidanceKind = Literal["none", "constant", "linear", "exponential"]


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(t, dtype=np.float64)

    def dsigma_dt(self, t):
        return self.sigma(t) * self.log_ratio

    def weight(self, t):
        """DSM weighting lambda(t) = sigma(t)^2."""
        return self.sigma(t) ** 2


def sigma(t, sched: NoiseSchedule = NoiseSchedule()):
    return sched.sigma(t)


@dataclass(frozen=True)
class GuidanceSchedule:
    kind: GuidanceKind = "none"
    w_min: float = 1.0
    w_max: float = 4.0
    rate: float = 5.0  # decay constant of the exponential schedule

    def __post_init__(self):
        if self.kind not in ("none", "constant", "linear", "exponential"):
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if not 1.0 <= self.w_min <= self.w_max:
            raise ValueError(f"need 1 <= w_min <= w_max, got {self.w_min}, {self.w_max}")

    def weight(self, t):
        return guidance_weight(t, self)


def guidance_weight(t, g: GuidanceSchedule):
    t = np.asarray(t, dtype=np.float64)
    if g.kind == "none":
        w = np.ones_like(t)
    elif g.kind == "constant":
        w = np.full_like(t, g.w_max)
    elif g.kind == "linear":
        w = g.w_max + (g.w_min - g.w_max) * t
    else:
        w = g.w_min + (g.w_max - g.w_min) * np.exp(-g.rate * t)
    return float(w) if w.ndim == 0 else w


def perturb(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    s = np.asarray(sched.sigma(t))
    if s.ndim == 1:
        s = s[:, None]
    return np.asarray(x0) + s * np.asarray(noise)


def dsm_loss(field: ScoreField, x0: np.ndarray, t: float, noise: np.ndarray, condition: Any = None,
             sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray | float:
    """sigma^2-weighted denoising score matching loss, i.e. ``||sigma * s + noise||^2``.

    Works on a single 9-vector or a ``(B, 9)`` batch (one value per row).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    single = x0.ndim == 1
    x0b, nb = np.atleast_2d(x0), np.atleast_2d(noise)
    xt = perturb(x0b, t, nb, sched)
    s = np.asarray(field(xt, t, condition))
    sig = sched.sigma(t)
    out = sched.weight(t) * np.sum((s + (xt - x0b) / sig ** 2) ** 2, axis=-1)
    return float(out[0]) if single else out


def scaled_score(field: ScoreField, x: np.ndarray, t: float, condition: Any,
                 g: GuidanceSchedule) -> np.ndarray:
    return guidance_weight(t, g) * np.asarray(field(x, t, condition))


def euler_ode_step(x: np.ndarray, t: float, dt: float, field: ScoreField, condition: Any,
                   g: GuidanceSchedule, sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """One explicit Euler step of the probability-flow ODE (``dt < 0``)."""
    s = scaled_score(field, x, t, condition, g)
    return x - sched.sigma(t) * sched.dsigma_dt(t) * s * dt


def ddim_step(x: np.ndarray, t: float, t_prev: float, field: ScoreField, condition: Any,
              g: GuidanceSchedule, eta: float = 0.0, noise: np.ndarray | None = None,
              sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """DDIM update with the guidance weight applied to the denoising term."""
    s = np.asarray(field(x, t, condition))
    sig_t, sig_p = sched.sigma(t), sched.sigma(t_prev)
    w = guidance_weight(t, g)
    out = x + sig_t ** 2 * (w * s) + np.sqrt(sig_p ** 2 - (eta * sig_p) ** 2) * (-s * sig_t)
    if eta > 0.0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise sample")
        out = out + eta * sig_p * noise
    return out


@dataclass(frozen=True)
class SamplerConfig:
    method: Literal["euler_ode", "ddim"] = "euler_ode"
    num_steps: int = 200
    eta: float = 0.0
    t_start: float = 1.0
    t_end: float = 1e-3
    guidance: GuidanceSchedule = dc_field(default_factory=GuidanceSchedule)
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("euler_ode", "ddim"):
            raise ValueError(f"unknown sampler {self.method!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0.0 < self.t_end < self.t_start:
            raise ValueError("need 0 < t_end < t_start")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    def time_grid(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.num_steps + 1)


@dataclass
class Trajectory:
    times: np.ndarray  # (num_steps + 1,)
    states: np.ndarray  # (num_steps + 1, 9)
    pose: Pose | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def __len__(self) -> int:
        return len(self.times)


def integrate(field: ScoreField, condition: Any, cfg: SamplerConfig, x_init: np.ndarray,
              rng: np.random.Generator | None = None,
              sched: NoiseSchedule = NoiseSchedule()) -> tuple[np.ndarray, np.ndarray]:
    """Run the configured step rule from ``x_init`` (``(B, 9)``); return times and all states."""
    ts = cfg.time_grid()
    x = np.array(x_init, dtype=np.float64)
    states = np.empty((len(ts),) + x.shape)
    states[0] = x
    for i in range(cfg.num_steps):
        t, t_next = ts[i], ts[i + 1]
        if cfg.method == "euler_ode":
            x = euler_ode_step(x, t, t_next - t, field, condition, cfg.guidance, sched)
        else:
            noise = rng.standard_normal(x.shape) if cfg.eta > 0.0 else None
            x = ddim_step(x, t, t_next, field, condition, cfg.guidance, cfg.eta, noise, sched)
        states[i + 1] = x
    return ts, states


def sample_batch(field: ScoreField, condition: Any, cfg: SamplerConfig, n: int,
                 rng: np.random.Generator, sched: NoiseSchedule = NoiseSchedule(),
                 dim: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` independent samples at once. Returns ``(times, states)`` with
    ``states`` shaped ``(num_steps + 1, n, dim)``."""
    x0 = sched.sigma(cfg.t_start) * rng.standard_normal((n, dim))
    return integrate(field, condition, cfg, x0, rng, sched)


def sample(field: ScoreField, condition: Any, cfg: SamplerConfig,
           rng: np.random.Generator | None = None, sched: NoiseSchedule = NoiseSchedule(),
           decode: Callable[[np.ndarray], Pose] = pose_unpack) -> Trajectory:
    """Single sampling run from ``N(0, sigma(t_start)^2 I)`` noise."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ts, states = sample_batch(field, condition, cfg, 1, rng, sched)
    states = states[:, 0, :]
    try:
        pose, err = decode(states[-1]), None
    except DegenerateRotationError as exc:
        pose, err = None, str(exc)
    return Trajectory(ts, states, pose, err)


# -- analytic score oracles ----------------------------------------------------

def analytic_gaussian_score(x: np.ndarray, t: float, mu: np.ndarray, var0: np.ndarray,
                            sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Score of ``N(mu, diag(var0) + sigma(t)^2 I)``."""
    return -(np.asarray(x) - mu) / (np.asarray(var0) + sched.sigma(t) ** 2)


def analytic_mixture_score(x: np.ndarray, t: float, components: Sequence[tuple[float, np.ndarray]],
                           sigma0: float, sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Score of an isotropic Gaussian mixture smoothed to noise level ``sigma(t)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    w = np.array([c[0] for c in components], dtype=np.float64)
    mus = np.stack([np.asarray(c[1], dtype=np.float64) for c in components])
    var = sigma0 ** 2 + sched.sigma(t) ** 2
    diff = xb[:, None, :] - mus[None, :, :]  # (B, K, D)
    logits = np.log(w)[None, :] - 0.5 * np.sum(diff ** 2, axis=-1) / var
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=1, keepdims=True)
    s = -np.einsum("bk,bkd->bd", r, diff) / var
    return s[0] if single else s


@dataclass(frozen=True)
class GaussianScore:
    """Score field of a fixed Gaussian target; ignores the condition."""
    mu: np.ndarray
    var0: np.ndarray
    sched: NoiseSchedule = NoiseSchedule()

    def __call__(self, x, t, condition=None):
        return analytic_gaussian_score(x, t, self.mu, self.var0, self.sched)


@dataclass(frozen=True)
class MixtureScore:
    components: tuple
    sigma0: float
    sched: NoiseSchedule = NoiseSchedule()

    def __call__(self, x, t, condition=None):
        return analytic_mixture_score(x, t, self.components, self.sigma0, self.sched)


# -- export --------------------------------------------------------------------

def write_trajectory_csv(traj: Trajectory, path: str | Path, gt: Pose | None = None,
                         symmetric: bool = False,
                         decode: Callable[[np.ndarray], Pose] = pose_unpack) -> None:
    """Columns ``t, x1..x9`` plus ``rot_err_rad, trans_err_m`` when ``gt`` is given."""
    header = ["t"] + [f"x{i}" for i in range(1, 10)]
    if gt is not None:
        header += ["rot_err_rad", "trans_err_m"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, x in zip(traj.times, traj.states):
            row = [repr(float(t))] + [repr(float(v)) for v in x]
            if gt is not None:
                try:
                    p = decode(x)
                    re = float(rotation_error(p.rotation, gt.rotation, symmetric))
                    te = float(np.linalg.norm(p.translation - gt.translation))
                except DegenerateRotationError:
                    re, te = float("nan"), float("nan")
                row += [repr(re), repr(te)]
            w.writerow(row)
