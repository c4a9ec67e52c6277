"""Synthetic tabletop-scale shapes rendered as partial, posed point clouds."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, rot_x, rot_y, sample_uniform_rotation
from .config import from_kv, to_kv
from .optim import FormatError

CATEGORIES = ("box", "cylinder", "cone", "ellipsoid")
Y_SYMMETRIC = frozenset({"cylinder", "cone"})
SYMMETRY_FLAGS = ("none", "y_continuous")
DATA_MAGIC = b"PDLDATA1"
NUM_POINTS = 1024
MIN_VISIBLE = 32

# category-specific shape detail: box corner chamfer (fraction of each edge),
# ellipsoid scale of its -x/-y halves. 0 / 1 give the plain symmetric solid.
DEFAULT_DETAIL = {"box": 0.5, "cylinder": 0.0, "cone": 0.0, "ellipsoid": 0.65}


class DegenerateViewError(RuntimeError):
    """Too few surface points face the camera."""


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    sizes: tuple[float, float, float]  # bounding extents (x, y, z) in meters
    seed: int = 0
    detail: float | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if any(not 0.03 <= s <= 0.3 for s in self.sizes):
            raise ValueError(f"sizes must lie in [0.03, 0.3] m, got {self.sizes}")
        if self.detail is None:
            object.__setattr__(self, "detail", DEFAULT_DETAIL[self.category])

    @property
    def symmetry(self) -> str:
        return "y_continuous" if self.category in Y_SYMMETRIC else "none"


@dataclass
class SceneSample:
    points: np.ndarray  # (1024, 3)
    gt_pose: Pose
    category: str
    symmetry: str = "none"
    sizes: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0


# -- surface sampling ----------------------------------------------------------

def _box_surface(ext: np.ndarray, chamfer: float, n: int, rng: np.random.Generator):
    h = ext / 2.0
    cut = chamfer * ext  # legs of the tetrahedron removed at the (+,+,+) corner
    faces, areas = [], []
    for ax in range(3):
        o = [i for i in range(3) if i != ax]
        full = ext[o[0]] * ext[o[1]]
        for sgn in (-1.0, 1.0):
            lost = 0.5 * cut[o[0]] * cut[o[1]] if (sgn > 0 and chamfer > 0) else 0.0
            faces.append((ax, sgn))
            areas.append(full - lost)
    tri = None
    if chamfer > 0:
        p0 = h - np.array([cut[0], 0, 0])
        p1 = h - np.array([0, cut[1], 0])
        p2 = h - np.array([0, 0, cut[2]])
        tri = (p0, p1, p2)
        areas.append(0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0)))
    areas = np.array(areas)
    which = rng.choice(len(areas), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for i, (ax, sgn) in enumerate(faces):
        idx = np.flatnonzero(which == i)
        if idx.size == 0:
            continue
        o = [j for j in range(3) if j != ax]
        got, have = [], 0
        while have < idx.size:
            uv = rng.uniform(-1.0, 1.0, (2 * idx.size + 8, 2)) * h[o]
            p = np.empty((len(uv), 3))
            p[:, ax] = sgn * h[ax]
            p[:, o] = uv
            if chamfer > 0 and sgn > 0:
                p = p[np.sum((h - p) / cut, axis=1) >= 1.0]
            got.append(p)
            have += len(p)
        pts[idx] = np.concatenate(got)[: idx.size]
        nrm[idx, ax] = sgn
    if tri is not None:
        idx = np.flatnonzero(which == len(faces))
        p0, p1, p2 = tri
        r1, r2 = rng.random(idx.size), rng.random(idx.size)
        sr = np.sqrt(r1)
        pts[idx] = (1 - sr)[:, None] * p0 + (sr * (1 - r2))[:, None] * p1 + (sr * r2)[:, None] * p2
        nv = np.cross(p1 - p0, p2 - p0)
        nrm[idx] = nv / np.linalg.norm(nv) * np.sign(nv.sum())
    return pts, nrm


def _disk(radius: float, y: float, n: int, rng: np.random.Generator):
    r = radius * np.sqrt(rng.random(n))
    th = rng.uniform(0.0, 2 * np.pi, n)
    return np.stack([r * np.cos(th), np.full(n, y), r * np.sin(th)], axis=1)


def _cylinder_surface(ext: np.ndarray, n: int, rng: np.random.Generator):
    r, hgt = ext[0] / 2.0, ext[1]
    areas = np.array([2 * np.pi * r * hgt, np.pi * r * r, np.pi * r * r])
    which = rng.choice(3, size=n, p=areas / areas.sum())
    th = rng.uniform(0.0, 2 * np.pi, n)
    pts = np.stack([r * np.cos(th), rng.uniform(-hgt / 2, hgt / 2, n), r * np.sin(th)], axis=1)
    nrm = np.stack([np.cos(th), np.zeros(n), np.sin(th)], axis=1)
    for k, sgn in ((1, 1.0), (2, -1.0)):
        idx = np.flatnonzero(which == k)
        pts[idx] = _disk(r, sgn * hgt / 2, idx.size, rng)
        nrm[idx] = (0.0, sgn, 0.0)
    return pts, nrm


def _cone_surface(ext: np.ndarray, n: int, rng: np.random.Generator):
    r, hgt = ext[0] / 2.0, ext[1]
    slant = np.hypot(r, hgt)
    lat, base = np.pi * r * slant, np.pi * r * r
    on_lat = rng.random(n) < lat / (lat + base)
    th = rng.uniform(0.0, 2 * np.pi, n)
    s = np.sqrt(rng.random(n))  # distance from apex as a fraction of the slant
    pts = np.stack([s * r * np.cos(th), hgt / 2 - s * hgt, s * r * np.sin(th)], axis=1)
    nrm = np.stack([hgt * np.cos(th), np.full(n, r), hgt * np.sin(th)], axis=1) / slant
    idx = np.flatnonzero(~on_lat)
    pts[idx] = _disk(r, -hgt / 2, idx.size, rng)
    nrm[idx] = (0.0, -1.0, 0.0)
    return pts, nrm


def _ellipsoid_surface(ext: np.ndarray, neg_scale: float, n: int, rng: np.random.Generator):
    # octant-wise ellipsoid: the -x and -y halves are shrunk by neg_scale
    a = ext[0] / (1.0 + neg_scale)
    b = ext[1] / (1.0 + neg_scale)
    c = ext[2] / 2.0
    # area density of the sphere -> surface map is |d / axes| * prod(axes) <= prod / min
    bound = max(ax * by * c / min(ax, by, c) for ax in (a, neg_scale * a) for by in (b, neg_scale * b))
    out_p, out_n, have = [], [], 0
    while have < n:
        d = rng.standard_normal((4 * n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        axes = np.stack([np.where(d[:, 0] > 0, a, neg_scale * a),
                         np.where(d[:, 1] > 0, b, neg_scale * b),
                         np.full(len(d), c)], axis=1)
        p = d * axes
        grad = d / axes
        dens = np.linalg.norm(grad, axis=1) * np.prod(axes, axis=1)
        keep = rng.random(len(d)) * bound < dens
        out_p.append(p[keep])
        out_n.append(grad[keep] / np.linalg.norm(grad[keep], axis=1, keepdims=True))
        have += int(keep.sum())
    return np.concatenate(out_p)[:n], np.concatenate(out_n)[:n]


def surface_points(spec: ShapeSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform samples on the canonical surface and their outward unit normals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ext = np.asarray(spec.sizes, dtype=np.float64)
    if spec.category == "box":
        return _box_surface(ext, spec.detail, n, rng)
    if spec.category == "cylinder":
        return _cylinder_surface(ext, n, rng)
    if spec.category == "cone":
        return _cone_surface(ext, n, rng)
    return _ellipsoid_surface(ext, spec.detail, n, rng)


def render_partial(spec: ShapeSpec, pose: Pose, view_dir=(0.0, 0.0, 1.0), n_out: int = NUM_POINTS,
                   rng: np.random.Generator | None = None, jitter: float = 0.002,
                   n_surface: int = 4096) -> SceneSample:
    """Back-face-culled view of the posed surface, resampled to ``n_out`` points."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    view = np.asarray(view_dir, dtype=np.float64)
    pts, nrm = surface_points(spec, n_surface, rng)
    pts = pose.transform(pts)
    nrm = nrm @ pose.rotation.T
    visible = pts[nrm @ view < 0.0]
    if len(visible) < MIN_VISIBLE:
        raise DegenerateViewError(f"only {len(visible)} visible points")
    out = visible[rng.integers(0, len(visible), n_out)]
    if jitter > 0:
        out = out + rng.normal(0.0, jitter, out.shape)
    return SceneSample(out, pose, spec.category, spec.symmetry, tuple(spec.sizes), spec.seed)


# -- poses ---------------------------------------------------------------------

def sample_gt_pose(rng: np.random.Generator, workspace=((-0.3, 0.3),) * 3, prior: str = "uniform",
                   yaw_range: float = np.pi, elevation=(20.0, 60.0), tilt_std: float = 5.0) -> Pose:
    """Ground-truth pose with translation uniform in ``workspace``.

    ``prior="uniform"`` draws a Haar rotation. ``prior="upright"`` keeps the
    object's y axis near vertical: a tilt (std in degrees), a yaw in
    ``[-yaw_range, yaw_range]`` and a camera elevation in ``elevation`` degrees.
    """
    if prior == "uniform":
        R = sample_uniform_rotation(rng)
    elif prior == "upright":
        tilt = rot_x(np.radians(tilt_std) * rng.standard_normal())
        yaw = rot_y(rng.uniform(-yaw_range, yaw_range))
        elev = rot_x(np.radians(rng.uniform(*elevation)))
        R = elev @ yaw @ tilt
    else:
        raise ValueError(f"unknown rotation prior {prior!r}")
    lo = np.array([w[0] for w in workspace], dtype=np.float64)
    hi = np.array([w[1] for w in workspace], dtype=np.float64)
    if np.any(hi < lo):
        raise ValueError("empty workspace")
    return Pose(R, rng.uniform(lo, hi))


# -- dataset -------------------------------------------------------------------

SIZE_RANGES = {
    "box": ((0.06, 0.2), (0.06, 0.2), (0.06, 0.2)),
    "cylinder": ((0.06, 0.16), (0.08, 0.2), None),
    "cone": ((0.08, 0.18), (0.08, 0.2), None),
    "ellipsoid": ((0.08, 0.2), (0.08, 0.2), (0.08, 0.2)),
}


@dataclass
class DataConfig:
    """Generator settings; round-trips through flat ``key=value`` text."""
    categories: tuple[str, ...] = CATEGORIES
    train_per_category: int = 500
    val_per_category: int = 50
    test_per_category: int = 200
    sigma_pc: float = 0.002
    workspace: float = 0.3
    prior: str = "upright"
    yaw_range_deg: float = 60.0
    elevation_min_deg: float = 20.0
    elevation_max_deg: float = 60.0
    tilt_std_deg: float = 5.0
    n_surface: int = 4096
    seed: int = 0

    def counts(self, split: str) -> int:
        return {"train": self.train_per_category, "val": self.val_per_category,
                "test": self.test_per_category}[split]

    def to_text(self) -> str:
        return to_kv(self)

    @classmethod
    def from_text(cls, text: str) -> "DataConfig":
        return from_kv(cls, text)


@dataclass
class Dataset:
    points: np.ndarray  # (M, 1024, 3)
    rotations: np.ndarray  # (M, 3, 3)
    translations: np.ndarray  # (M, 3)
    categories: np.ndarray  # (M,) index into ``names``
    symmetric: np.ndarray  # (M,) bool
    sizes: np.ndarray  # (M, 3)
    seeds: np.ndarray  # (M,) uint64
    names: tuple[str, ...] = CATEGORIES
    seed: int = 0
    config_text: str = ""

    def __len__(self) -> int:
        return len(self.points)

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    def sample(self, i: int) -> SceneSample:
        name = self.names[int(self.categories[i])]
        return SceneSample(self.points[i], self.pose(i), name,
                           "y_continuous" if self.symmetric[i] else "none",
                           tuple(self.sizes[i]), int(self.seeds[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.points[idx], self.rotations[idx], self.translations[idx],
                       self.categories[idx], self.symmetric[idx], self.sizes[idx], self.seeds[idx],
                       self.names, self.seed, self.config_text)

    def category_counts(self) -> dict[str, int]:
        return {n: int(np.sum(self.categories == i)) for i, n in enumerate(self.names)}


_SPLIT_ID = {"train": 0, "val": 1, "test": 2}


def _draw_sizes(category: str, rng: np.random.Generator) -> tuple[float, float, float]:
    rx_, ry_, rz_ = SIZE_RANGES[category]
    sx = rng.uniform(*rx_)
    sy = rng.uniform(*ry_)
    sz = sx if rz_ is None else rng.uniform(*rz_)
    return (float(sx), float(sy), float(sz))


def make_sample(cfg: DataConfig, category: str, rng: np.random.Generator, seed: int) -> SceneSample:
    spec = ShapeSpec(category, _draw_sizes(category, rng), seed)
    ws = ((-cfg.workspace, cfg.workspace),) * 3
    while True:
        pose = sample_gt_pose(rng, ws, cfg.prior, np.radians(cfg.yaw_range_deg),
                              (cfg.elevation_min_deg, cfg.elevation_max_deg), cfg.tilt_std_deg)
        try:
            return render_partial(spec, pose, (0.0, 0.0, 1.0), NUM_POINTS, rng, cfg.sigma_pc, cfg.n_surface)
        except DegenerateViewError:
            continue


def generate_dataset(cfg: DataConfig, split: str = "train", seed: int | None = None) -> Dataset:
    """Pure function of ``(cfg, split, seed)``; every record has its own random stream."""
    seed = cfg.seed if seed is None else seed
    n = cfg.counts(split)
    samples, seeds = [], []
    for ci, cat in enumerate(cfg.categories):
        for i in range(n):
            rec_seed = int(np.random.SeedSequence([seed, _SPLIT_ID[split], CATEGORIES.index(cat), i])
                           .generate_state(1, np.uint64)[0])
            samples.append(make_sample(cfg, cat, np.random.default_rng(rec_seed), rec_seed))
            seeds.append(rec_seed)
    names = tuple(cfg.categories)
    return Dataset(
        points=np.stack([s.points for s in samples]) if samples else np.zeros((0, NUM_POINTS, 3)),
        rotations=np.stack([s.gt_pose.rotation for s in samples]) if samples else np.zeros((0, 3, 3)),
        translations=np.stack([s.gt_pose.translation for s in samples]) if samples else np.zeros((0, 3)),
        categories=np.array([names.index(s.category) for s in samples], dtype=np.int64),
        symmetric=np.array([s.symmetry == "y_continuous" for s in samples], dtype=bool),
        sizes=np.array([s.sizes for s in samples], dtype=np.float64).reshape(-1, 3),
        seeds=np.array(seeds, dtype=np.uint64),
        names=names, seed=seed, config_text=cfg.to_text(),
    )


# -- binary layout -------------------------------------------------------------
# magic | u64 count | u32 ncat | ncat * (u32 len, name, u64 count) | u64 seed
# | u64 len, config text | count * record
# record: u32 category, u32 symmetry, u64 seed, 3 f64 sizes, 9 f64 rotation,
#         3 f64 translation, 1024*3 f64 points   (all little-endian)

_REC_HEAD = struct.Struct("<IIQ")


def save_dataset(path: str | Path, ds: Dataset) -> None:
    buf = bytearray(DATA_MAGIC)
    buf += struct.pack("<Q", len(ds))
    counts = ds.category_counts()
    buf += struct.pack("<I", len(ds.names))
    for name in ds.names:
        b = name.encode()
        buf += struct.pack("<I", len(b)) + b + struct.pack("<Q", counts[name])
    buf += struct.pack("<Q", ds.seed)
    cfg = ds.config_text.encode()
    buf += struct.pack("<Q", len(cfg)) + cfg
    for i in range(len(ds)):
        buf += _REC_HEAD.pack(int(ds.categories[i]), int(ds.symmetric[i]), int(ds.seeds[i]))
        buf += np.asarray(ds.sizes[i], "<f8").tobytes()
        buf += np.asarray(ds.rotations[i], "<f8").tobytes()
        buf += np.asarray(ds.translations[i], "<f8").tobytes()
        buf += np.asarray(ds.points[i], "<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise FormatError(f"bad dataset magic {raw[:8]!r}", 0)
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"truncated dataset: wanted {n} bytes", pos)
        out = raw[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    (ncat,) = struct.unpack("<I", take(4))
    names, declared = [], {}
    for _ in range(ncat):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (c,) = struct.unpack("<Q", take(8))
        names.append(name)
        declared[name] = c
    (seed,) = struct.unpack("<Q", take(8))
    (cl,) = struct.unpack("<Q", take(8))
    config_text = take(cl).decode()
    if sum(declared.values()) != count:
        raise FormatError("per-category counts do not add up to record count", 8)
    cats = np.empty(count, np.int64)
    sym = np.empty(count, bool)
    seeds = np.empty(count, np.uint64)
    sizes = np.empty((count, 3))
    rots = np.empty((count, 3, 3))
    trans = np.empty((count, 3))
    pts = np.empty((count, NUM_POINTS, 3))
    for i in range(count):
        c, s, sd = _REC_HEAD.unpack(take(_REC_HEAD.size))
        cats[i], sym[i], seeds[i] = c, bool(s), sd
        sizes[i] = np.frombuffer(take(24), "<f8")
        rots[i] = np.frombuffer(take(72), "<f8").reshape(3, 3)
        trans[i] = np.frombuffer(take(24), "<f8")
        pts[i] = np.frombuffer(take(NUM_POINTS * 24), "<f8").reshape(NUM_POINTS, 3)
    if pos != len(raw):
        raise FormatError("trailing bytes after last record", pos)
    return Dataset(pts, rots, trans, cats, sym, sizes, seeds, tuple(names), int(seed), config_text)
