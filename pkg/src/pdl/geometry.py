"""Rotations, poses and the 6D / 9D vector encodings used by the networks.

Plain-numpy functions accept a single matrix or a leading batch dimension.
The ``*_t`` variants operate on :class:`~pdl.tensor.Tensor` batches so they
can sit inside a differentiable loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, cross

DEGENERATE_TOL = 1e-12
ARCCOS_EPS = 1e-7  # keeps d(arccos) finite inside training losses


class DegenerateRotationError(ValueError):
    """The 6D input does not span a plane, so Gram-Schmidt is undefined."""


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("pose translation must be finite")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return (np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(R) - 1.0) < tol)


def rot_to_6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def gs_orthonormalize(v: np.ndarray) -> np.ndarray:
    """Map 6D vectors ``[a1 | a2]`` to rotation matrices by Gram-Schmidt."""
    v = np.asarray(v, dtype=np.float64)
    a1, a2 = v[..., 0:3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < DEGENERATE_TOL):
        raise DegenerateRotationError("first 6D column has (near) zero norm")
    b1 = a1 / n1
    r = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(n2 < DEGENERATE_TOL):
        raise DegenerateRotationError("6D columns are (near) parallel")
    b2 = r / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def geodesic_distance(R1: np.ndarray, R2: np.ndarray) -> np.ndarray | float:
    """Angle of ``R1 R2^T`` in radians.

    Uses ``atan2(sin, cos)`` of the relative rotation, which stays accurate near
    0 and pi where ``arccos`` of the trace loses half the digits.
    """
    M = np.einsum("...ij,...kj->...ik", np.asarray(R1, dtype=np.float64), np.asarray(R2, dtype=np.float64))
    c = (np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0
    axis = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], -1)
    out = np.arctan2(np.linalg.norm(axis, axis=-1) / 2.0, c)
    return float(out) if np.ndim(out) == 0 else out


def y_axis_distance(R1: np.ndarray, R2: np.ndarray) -> np.ndarray | float:
    """Angle between the images of the y axis; blind to rotations about y."""
    d = np.sum(np.asarray(R1)[..., :, 1] * np.asarray(R2)[..., :, 1], axis=-1)
    out = np.arccos(np.clip(d, -1.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def rotation_error(R1, R2, symmetric) -> np.ndarray | float:
    """Geodesic distance, or y-axis distance where ``symmetric`` is set."""
    if np.ndim(symmetric) == 0:
        return y_axis_distance(R1, R2) if symmetric else geodesic_distance(R1, R2)
    return np.where(symmetric, y_axis_distance(R1, R2), geodesic_distance(R1, R2))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def sample_uniform_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-uniform rotation(s) from normalized Gaussian quaternions."""
    q = rng.standard_normal(4 if size is None else (size, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quat_to_matrix(q)


def pose_pack(p: Pose) -> np.ndarray:
    return np.concatenate([rot_to_6d(p.rotation), p.translation])


def pose_unpack(v: np.ndarray) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    return Pose(gs_orthonormalize(v[:6]), v[6:9].copy())


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar factor with det correction)."""
    U, s, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


# -- differentiable versions ---------------------------------------------------

def gs_columns_t(v: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gram-Schmidt on a ``B x 6`` (or wider) tensor; returns the three columns."""
    a1, a2 = v[:, 0:3], v[:, 3:6]
    b1 = a1 / (a1 * a1).sum(axis=1, keepdims=True).sqrt()
    r = a2 - (b1 * a2).sum(axis=1, keepdims=True) * b1
    b2 = r / (r * r).sum(axis=1, keepdims=True).sqrt()
    return b1, b2, cross(b1, b2)


def rotation_loss_t(cols: tuple[Tensor, Tensor, Tensor], R_gt: np.ndarray,
                    symmetric: np.ndarray) -> Tensor:
    """Per-item geodesic (or y-axis, where ``symmetric``) angle as a ``B`` tensor."""
    b1, b2, b3 = cols
    R_gt = np.asarray(R_gt)
    sym = np.asarray(symmetric, dtype=bool).reshape(-1, 1)
    g1, g2, g3 = R_gt[:, :, 0], R_gt[:, :, 1], R_gt[:, :, 2]
    tr = (b1 * g1 + b2 * g2 + b3 * g3).sum(axis=1, keepdims=True)
    cos_full = (tr - 1.0) * 0.5
    cos_y = (b2 * g2).sum(axis=1, keepdims=True)
    cos = cos_full * (~sym).astype(float) + cos_y * sym.astype(float)
    return cos.clip(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).arccos().reshape(-1)


def matrix_from_cols_t(cols: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    b1, b2, b3 = cols
    return concat([b1, b2, b3], axis=1)
