"""Point encoder, regression head and conditional diffusion head.

All three live in one :class:`~pdl.optim.ParamStore` under the ``enc.``,
``reg.`` and ``diff.`` namespaces. Poses enter the networks in *model space*:
the 6D rotation followed by ``(translation - centroid) * trans_scale``, where
``centroid`` is the mean of the observed points.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import NoiseSchedule
from .geometry import Pose, gs_orthonormalize, rot_to_6d
from .optim import ParamStore
from .tensor import ShapeError, Tensor, as_tensor, concat, linear, shared_mlp_maxpool

IDENTITY_9 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class ModelConfig:
    num_points: int = 1024
    enc_widths: tuple[int, ...] = (64, 128, 1024)
    reg_hidden: tuple[int, ...] = (512, 512)
    time_freqs: int = 16
    time_dim: int = 128
    pose_dim: int = 256
    trunk_hidden: tuple[int, ...] = (512, 512)
    point_scale: float = 10.0
    trans_scale: float = 10.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    sigma_data: float = 1.0

    @property
    def sched(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max)

    @property
    def feature_dim(self) -> int:
        return self.enc_widths[-1]

    @property
    def trunk_in(self) -> int:
        return self.feature_dim + self.time_dim + self.pose_dim


def _init_mlp(params: ParamStore, prefix: str, dims: Sequence[int], rng: np.random.Generator,
              last_scale: float = 1.0) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        scale = np.sqrt(2.0 / a) * (last_scale if i == len(dims) - 2 else 1.0)
        params.add(f"{prefix}.l{i}.W", rng.standard_normal((a, b)) * scale)
        params.add(f"{prefix}.l{i}.b", np.zeros(b))


def mlp(x: Tensor, params: ParamStore, prefix: str, n_layers: int, final_relu: bool = False) -> Tensor:
    for i in range(n_layers):
        x = linear(x, params[f"{prefix}.l{i}.W"], params[f"{prefix}.l{i}.b"])
        if i < n_layers - 1 or final_relu:
            x = x.relu()
    return x


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    p = ParamStore()
    _init_mlp(p, "enc", (3,) + tuple(cfg.enc_widths), rng)
    _init_mlp(p, "reg", (cfg.feature_dim,) + tuple(cfg.reg_hidden) + (9,), rng, last_scale=0.01)
    p["reg.l%d.b" % (len(cfg.reg_hidden))].data = IDENTITY_9.copy()
    _init_mlp(p, "diff.time", (2 * cfg.time_freqs, cfg.time_dim, cfg.time_dim), rng)
    _init_mlp(p, "diff.pose", (9, cfg.pose_dim, cfg.pose_dim), rng)
    _init_mlp(p, "diff.trunk", (cfg.trunk_in,) + tuple(cfg.trunk_hidden) + (9,), rng, last_scale=0.1)
    return p


def centroids(points: np.ndarray) -> np.ndarray:
    """Per-cloud mean point, summed in sorted order so it ignores point order exactly."""
    return np.sort(np.asarray(points, dtype=np.float64), axis=-2).mean(axis=-2)


def encode(points, params: ParamStore, cfg: ModelConfig, fused: bool = True) -> Tensor:
    """Global feature of one ``(N, 3)`` cloud or a ``(B, N, 3)`` batch.

    Points are centred on their centroid and scaled, passed through a shared
    per-point MLP and max-pooled over points, so the result is exactly
    invariant to point order.
    """
    pts = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[1:] != (cfg.num_points, 3):
        raise ShapeError(f"expected point cloud(s) of shape (*, {cfg.num_points}, 3), got {pts.shape}")
    B, N, _ = pts.shape
    x = (pts - centroids(pts)[:, None, :]) * cfg.point_scale
    n = len(cfg.enc_widths)
    if fused:
        feat = shared_mlp_maxpool(x, [params[f"enc.l{i}.W"] for i in range(n)],
                                  [params[f"enc.l{i}.b"] for i in range(n)])
    else:
        h = mlp(Tensor(x.reshape(B * N, 3)), params, "enc", n, final_relu=True)
        feat = h.reshape(B, N, cfg.feature_dim).max(axis=1)
    return feat[0] if single else feat


def time_features(t: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Sinusoids of log sigma(t), rescaled to roughly [-1, 1] over the schedule."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    s = cfg.sched
    u = (np.log(s.sigma(t)) - np.log(s.sigma_min)) / s.log_ratio * 2.0 - 1.0
    freqs = np.pi * 2.0 ** np.arange(cfg.time_freqs // 2 + cfg.time_freqs % 2) / 2.0
    freqs = np.concatenate([freqs, freqs])[: cfg.time_freqs]
    phase = np.concatenate([np.zeros(cfg.time_freqs // 2 + cfg.time_freqs % 2),
                            np.full(cfg.time_freqs // 2, 0.5)])[: cfg.time_freqs]
    arg = u[:, None] * freqs[None, :] + phase[None, :] * np.pi
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def time_embed(t, params: ParamStore, cfg: ModelConfig) -> Tensor:
    return mlp(Tensor(time_features(t, cfg)), params, "diff.time", 2)


def pose_embed(x, params: ParamStore, cfg: ModelConfig) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    return mlp(x, params, "diff.pose", 2)


def regress(feature: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Raw 9-vector output of the regression head (model space)."""
    feature = as_tensor(feature)
    if feature.ndim == 1:
        feature = feature.reshape(1, -1)
    if feature.shape[1] != cfg.feature_dim:
        raise ShapeError(f"feature has {feature.shape[1]} dims, expected {cfg.feature_dim}")
    return mlp(feature, params, "reg", len(cfg.reg_hidden) + 1)


def diffusion_trunk(feature: Tensor, x, t, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Trunk output, which parameterizes ``sigma(t) * score``.

    The MLP ``F`` predicts the clean pose through a skip connection,
    ``D = c_skip x + c_out F``, and the return value is ``(D - x) / sigma``.
    At large sigma the analytic skip carries the ``-x / sigma`` part, so the
    network only has to supply the conditional estimate.
    """
    feature = as_tensor(feature)
    x = as_tensor(x)
    if feature.ndim == 1:
        feature = feature.reshape(1, -1)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != 9 or feature.shape[1] != cfg.feature_dim or feature.shape[0] != x.shape[0]:
        raise ShapeError(f"feature {feature.shape} and pose {x.shape} do not form a batch")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    # noisy poses reach |x| ~ 3 sigma_max; rescale to unit order before embedding
    sig = cfg.sched.sigma(t)
    sd = cfg.sigma_data
    c_in = 1.0 / np.sqrt(sig ** 2 + sd ** 2)
    h = concat([feature, time_embed(t, params, cfg), pose_embed(x * c_in[:, None], params, cfg)], axis=1)
    F = mlp(h, params, "diff.trunk", len(cfg.trunk_hidden) + 1)
    return x * (-sig * c_in ** 2)[:, None] + F * (sd * c_in)[:, None]


def diffusion_score(feature: Tensor, x, t, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Conditional score for a batch: trunk output divided by sigma(t)."""
    out = diffusion_trunk(feature, x, t, params, cfg)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (out.shape[0],))
    return out / cfg.sched.sigma(t)[:, None]


# -- model space <-> poses -----------------------------------------------------

def to_model_space(rotations: np.ndarray, translations: np.ndarray, centroid: np.ndarray,
                   cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([rot_to_6d(rotations), (translations - centroid) * cfg.trans_scale], axis=-1)


def from_model_space(v: np.ndarray, centroid: np.ndarray, cfg: ModelConfig) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    return Pose(gs_orthonormalize(v[:6]), v[6:9] / cfg.trans_scale + centroid)


class PoseNet:
    """Bundles parameters and config; convenience wrappers for inference."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))

    def encode(self, points) -> Tensor:
        return encode(points, self.params, self.cfg)

    def features(self, points: np.ndarray, chunk: int = 64) -> np.ndarray:
        pts = np.asarray(points)
        if pts.ndim == 2:
            return self.encode(pts).data
        return np.concatenate([self.encode(pts[i:i + chunk]).data for i in range(0, len(pts), chunk)])

    def regress(self, points: np.ndarray) -> list[Pose]:
        pts = np.asarray(points)
        pts = pts[None] if pts.ndim == 2 else pts
        out = regress(Tensor(self.features(pts)), self.params, self.cfg).data
        cen = centroids(pts)
        return [from_model_space(o, c, self.cfg) for o, c in zip(out, cen)]

    def score(self, x: np.ndarray, t: float, features: np.ndarray) -> np.ndarray:
        """Score field signature ``(x, t, condition)`` with condition = features."""
        feats = np.asarray(features)
        x = np.asarray(x)
        if feats.ndim == 1:
            feats = np.broadcast_to(feats, (len(x), feats.shape[0]))
        return diffusion_score(Tensor(feats), Tensor(x), t, self.params, self.cfg).data

    __call__ = score
