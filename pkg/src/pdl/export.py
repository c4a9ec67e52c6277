"""Plot-ready exports: rotation distributions on a Mollweide map and error bands
along sampling trajectories. Output is a pure function of the inputs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffusion import Trajectory
from .evaluate import batch_errors, decode_batch
from .geometry import Pose
from .tensor import ContractError

PALETTE = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e")


def _num(v: float) -> str:
    return repr(float(v))


def yxz_angles(R: np.ndarray) -> np.ndarray:
    """Intrinsic Y-X-Z angles ``(yaw, pitch, roll)`` with ``R = Ry(yaw) Rx(pitch) Rz(roll)``."""
    R = np.asarray(R, dtype=np.float64)
    pitch = np.arcsin(np.clip(-R[..., 1, 2], -1.0, 1.0))
    yaw = np.arctan2(R[..., 0, 2], R[..., 2, 2])
    roll = np.arctan2(R[..., 1, 0], R[..., 1, 1])
    return np.stack([yaw, pitch, roll], axis=-1)


def mollweide(lon: np.ndarray, lat: np.ndarray, iters: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Mollweide projection of radians; ``x`` in [-2*sqrt2, 2*sqrt2], ``y`` in [-sqrt2, sqrt2]."""
    lon, lat = np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
    theta = np.array(lat, copy=True)
    target = np.pi * np.sin(lat)
    for _ in range(iters):
        f = 2 * theta + np.sin(2 * theta) - target
        fp = 2 + 2 * np.cos(2 * theta)
        step = np.where(fp > 1e-12, f / np.where(fp > 1e-12, fp, 1.0), 0.0)
        theta = theta - step
    theta = np.where(np.abs(lat) >= np.pi / 2 - 1e-12, np.sign(lat) * np.pi / 2, theta)
    return 2 * np.sqrt(2) / np.pi * lon * np.cos(theta), np.sqrt(2) * np.sin(theta)


def _roll_colour(roll: float) -> str:
    # roll in [-pi, pi] mapped onto a blue-to-red ramp
    u = (roll + np.pi) / (2 * np.pi)
    return "#%02x%02x%02x" % (int(255 * u), 64, int(255 * (1 - u)))


def export_rotation_distribution(samples: Sequence[Pose] | np.ndarray, gt: Pose,
                                 path: str | Path) -> np.ndarray:
    """Write ``path`` (CSV: yaw_lon, pitch_lat, roll_color) and a sibling ``.svg``.

    Angles are those of ``gt^T R``, so the ground truth sits at the map centre.
    Returns the ``(n, 3)`` angle table.
    """
    Rs = samples if isinstance(samples, np.ndarray) else np.asarray([p.rotation for p in samples])
    if len(Rs) < 1:
        raise ContractError("need at least one sample")
    ang = yxz_angles(np.einsum("ji,njk->nik", gt.rotation, Rs))
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["yaw_lon", "pitch_lat", "roll_color"])
        for row in ang:
            w.writerow([_num(v) for v in row])
    x, y = mollweide(ang[:, 0], ang[:, 1])
    s = 100.0  # svg units per projection unit
    W, H = 2 * np.sqrt(2) * s, np.sqrt(2) * s
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{-W - 10:.3f} {-H - 10:.3f} '
             f'{2 * W + 20:.3f} {2 * H + 20:.3f}">',
             f'<ellipse cx="0" cy="0" rx="{W:.3f}" ry="{H:.3f}" fill="#f4f4f4" stroke="#444"/>',
             f'<line x1="{-W:.3f}" y1="0" x2="{W:.3f}" y2="0" stroke="#bbb"/>',
             f'<line x1="0" y1="{-H:.3f}" x2="0" y2="{H:.3f}" stroke="#bbb"/>']
    for xi, yi, r in zip(x, y, ang[:, 2]):
        parts.append(f'<circle cx="{xi * s:.3f}" cy="{-yi * s:.3f}" r="3" fill="{_roll_colour(r)}"/>')
    parts.append('<path d="M -7 -7 L 7 7 M -7 7 L 7 -7" stroke="black" stroke-width="2"/>')
    parts.append("</svg>")
    path.with_suffix(".svg").write_text("\n".join(parts) + "\n")
    return ang


@dataclass
class ErrorBands:
    times: np.ndarray
    rot_mean: np.ndarray
    rot_std: np.ndarray
    trans_mean: np.ndarray
    trans_std: np.ndarray


def trajectory_errors(trajectories: Sequence[Trajectory], gt: Pose, symmetric: bool = False,
                      centroid: np.ndarray | None = None, trans_scale: float = 1.0) -> ErrorBands:
    """Per-step mean and population std of rotation (rad) and translation (m) error."""
    if not trajectories:
        raise ContractError("need at least one trajectory")
    times = np.asarray(trajectories[0].times)
    for tr in trajectories[1:]:
        if len(tr.times) != len(times) or not np.array_equal(tr.times, times):
            raise ContractError("trajectories do not share a time grid")
    states = np.stack([tr.states for tr in trajectories], axis=1)  # (T, n, 9)
    cen = np.zeros(3) if centroid is None else np.asarray(centroid)
    R, t, ok = decode_batch(states, cen, trans_scale)
    rot, trans = batch_errors(R, t, gt.rotation, gt.translation, symmetric)
    rot = np.where(ok, rot, np.nan)
    trans = np.where(ok, trans, np.nan)
    return ErrorBands(times, np.nanmean(rot, axis=1), np.nanstd(rot, axis=1),
                      np.nanmean(trans, axis=1), np.nanstd(trans, axis=1))


def write_bands_csv(bands: ErrorBands, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "rot_mean", "rot_std", "trans_mean", "trans_std"])
        for row in zip(bands.times, bands.rot_mean, bands.rot_std, bands.trans_mean, bands.trans_std):
            w.writerow([_num(v) for v in row])


def _band_panel(runs: Mapping[str, ErrorBands], attr: str, x0: float, w: float, h: float,
                title: str) -> list[str]:
    means = {k: getattr(b, attr + "_mean") for k, b in runs.items()}
    stds = {k: getattr(b, attr + "_std") for k, b in runs.items()}
    top = max(float(np.nanmax(means[k] + stds[k])) for k in runs) or 1.0
    out = [f'<g transform="translate({x0:.1f},20)">',
           f'<rect x="0" y="0" width="{w:.1f}" height="{h:.1f}" fill="none" stroke="#444"/>',
           f'<text x="{w / 2:.1f}" y="-6" text-anchor="middle" font-size="12">{title}</text>']
    for i, (label, b) in enumerate(runs.items()):
        colour = PALETTE[i % len(PALETTE)]
        t0, t1 = float(b.times[0]), float(b.times[-1])
        # time runs from t_start on the left to t_end on the right
        px = (b.times - t0) / ((t1 - t0) or 1.0) * w
        up = h - np.clip(means[label] + stds[label], 0, None) / top * h
        lo = h - np.clip(means[label] - stds[label], 0, None) / top * h
        mid = h - means[label] / top * h
        band = " ".join(f"{a:.2f},{c:.2f}" for a, c in zip(px, up))
        band += " " + " ".join(f"{a:.2f},{c:.2f}" for a, c in zip(px[::-1], lo[::-1]))
        out.append(f'<polygon points="{band}" fill="{colour}" fill-opacity="0.25" stroke="none"/>')
        line = " ".join(f"{a:.2f},{c:.2f}" for a, c in zip(px, mid))
        out.append(f'<polyline points="{line}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<text x="8" y="{16 + 14 * i}" font-size="11" fill="{colour}">{label}</text>')
    out.append("</g>")
    return out


def export_trajectory_errors(runs: Mapping[str, Sequence[Trajectory]] | Sequence[Trajectory], gt: Pose,
                             path: str | Path, symmetric: bool = False,
                             centroid: np.ndarray | None = None,
                             trans_scale: float = 1.0) -> dict[str, ErrorBands]:
    """CSV of error bands per run label plus one SVG with mean lines and std bands.

    A bare list of trajectories is treated as a single run labelled ``run``. With
    one label the CSV goes to ``path``; with several, to ``<stem>_<label>.csv``.
    """
    if not isinstance(runs, Mapping):
        runs = {"run": list(runs)}
    bands = {k: trajectory_errors(v, gt, symmetric, centroid, trans_scale) for k, v in runs.items()}
    grids = list(bands.values())
    if any(len(b.times) != len(grids[0].times) or not np.array_equal(b.times, grids[0].times)
           for b in grids[1:]):
        raise ContractError("runs do not share a time grid")
    path = Path(path)
    if len(bands) == 1:
        write_bands_csv(grids[0], path)
    else:
        for label, b in bands.items():
            write_bands_csv(b, path.with_name(f"{path.stem}_{label}{path.suffix or '.csv'}"))
    w, h = 320.0, 200.0
    svg = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {2 * w + 60:.0f} {h + 40:.0f}">']
    svg += _band_panel(bands, "rot", 20, w, h, "rotation error (rad)")
    svg += _band_panel(bands, "trans", w + 40, w, h, "translation error (m)")
    svg.append("</svg>")
    path.with_suffix(".svg").write_text("\n".join(svg) + "\n")
    return bands
