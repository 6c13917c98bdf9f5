"""Analytic synthetic scenes, ray-cast rendering and the binary dataset format.

Scenes are built from spheres, axis-aligned boxes and square plane patches so
every pixel's depth is exact. The scene world uses z-up; cameras follow the
usual x-right / y-down / z-forward convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyView, FormatError
from .geometry import (
    CameraIntrinsics,
    CameraModel,
    Frame,
    Pointmap,
    RigidTransform,
    compose,
    invert,
    pixel_grid,
)

LIGHT_DIR = np.ones(3) / np.sqrt(3.0)
AMBIENT = 0.25

DATA_MAGIC = b"F3RDATA1"
DATA_VERSION = 1


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class AxisAlignedBox:
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray
    half_extent: float


@dataclass(frozen=True)
class ScenePrimitive:
    shape: Sphere | AxisAlignedBox | Plane
    albedo: np.ndarray


@dataclass(frozen=True)
class SceneSpec:
    min_primitives: int = 2
    max_primitives: int = 5
    extent: float = 2.0
    rng_seed: int = 0
    # adds a grey floor square spanning the extent below the objects
    ground_plane: bool = False

    def __post_init__(self):
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if not 1 <= self.min_primitives <= self.max_primitives:
            raise ValueError("need 1 <= min_primitives <= max_primitives")


@dataclass
class GroundTruthSample:
    """N rendered views with exact pointmaps.

    Arrays are stacked over views: ``images`` (N, H, W, 3), ``local_points`` and
    ``global_points`` (N, H, W, 3), ``masks`` (N, H, W) bool.
    """

    images: np.ndarray
    local_points: np.ndarray
    global_points: np.ndarray
    masks: np.ndarray
    cameras: list[CameraModel] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def local_pointmap(self, i: int) -> Pointmap:
        return Pointmap(self.local_points[i], Frame.LOCAL, self.masks[i])

    def global_pointmap(self, i: int) -> Pointmap:
        return Pointmap(self.global_points[i], Frame.GLOBAL, self.masks[i])

    def subset(self, views) -> "GroundTruthSample":
        """Select views; the global frame stays the frame of ``views[0]``."""
        views = list(views)
        anchor = invert(self.cameras[views[0]].pose)
        cams = [
            CameraModel(self.cameras[v].intrinsics, compose(anchor, self.cameras[v].pose))
            for v in views
        ]
        glob = np.stack([cams[k].pose.apply(self.local_points[v]) for k, v in enumerate(views)])
        glob[~self.masks[views]] = 0.0
        return GroundTruthSample(
            self.images[views].copy(),
            self.local_points[views].copy(),
            glob.astype(self.global_points.dtype),
            self.masks[views].copy(),
            cams,
        )


# --------------------------------------------------------------------------- scenes


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _random_primitive(rng: np.random.Generator, extent: float, near_origin: bool) -> ScenePrimitive:
    half = extent / 2.0
    kind = rng.integers(3)
    albedo = rng.uniform(0.2, 1.0, size=3)
    if near_origin:
        # center within 0.5 of the origin, size >= 0.5 -> intersects the unit ball
        center = rng.uniform(-0.5, 0.5, size=3) / np.sqrt(3.0)
        size = rng.uniform(0.5, min(0.8, half))
    else:
        size = rng.uniform(0.15, min(0.5, half / 2))
        center = rng.uniform(-half + size, half - size, size=3)
    if kind == 0:
        return ScenePrimitive(Sphere(center, float(size)), albedo)
    if kind == 1:
        dims = size * rng.uniform(0.6, 1.0, size=3)
        dims[np.argmax(dims)] = size
        lo = np.clip(center - dims, -half, half)
        hi = np.clip(center + dims, -half, half)
        return ScenePrimitive(AxisAlignedBox(lo, hi), albedo)
    normal = _unit(rng.normal(size=3))
    return ScenePrimitive(Plane(center, normal, float(size)), albedo)


def sample_scene(spec: SceneSpec) -> list[ScenePrimitive]:
    """Deterministic random scene; the first primitive always meets the unit ball."""
    rng = np.random.default_rng(spec.rng_seed)
    count = int(rng.integers(spec.min_primitives, spec.max_primitives + 1))
    prims = [_random_primitive(rng, spec.extent, near_origin=(i == 0)) for i in range(count)]
    if spec.ground_plane:
        half = spec.extent / 2.0
        floor = Plane(np.array([0.0, 0.0, -0.3 * half]), np.array([0.0, 0.0, 1.0]), half)
        prims.append(ScenePrimitive(floor, np.array([0.6, 0.55, 0.5])))
    return prims


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = _unit(np.asarray(target, dtype=np.float64) - eye)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x = _unit(x)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), eye)


def sample_camera_ring(
    n_views: int,
    radius: float = 3.0,
    seed: int = 0,
    reexpress: bool = True,
) -> list[RigidTransform]:
    """Jittered ring of cameras looking at the origin.

    With ``reexpress`` (the default) the poses are given relative to the first
    camera, so the first pose is the identity. ``reexpress=False`` returns the
    poses in the scene world frame.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 2 * np.pi)
    poses = []
    for i in range(n_views):
        az = start + 2 * np.pi * i / n_views + rng.uniform(-0.3, 0.3) * np.pi / n_views
        r = radius * rng.uniform(0.9, 1.1)
        elev = rng.uniform(np.deg2rad(10), np.deg2rad(40))
        eye = r * np.array([np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        target = rng.uniform(-0.05, 0.05, size=3)
        poses.append(look_at(eye, target))
    if reexpress:
        anchor = invert(poses[0])
        poses = [compose(anchor, p) for p in poses]
        poses[0] = RigidTransform.identity()
    return poses


# --------------------------------------------------------------------------- ray casting


def _hit_sphere(o, d, s: Sphere):
    oc = o - s.center
    b = d @ oc
    c = oc @ oc - s.radius**2
    disc = b * b - c
    t = np.full(d.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t[ok] = tt[ok]
    pts = o + np.where(ok, t, 0.0)[:, None] * d
    n = (pts - s.center) / s.radius
    return t, n


def _hit_box(o, d, b: AxisAlignedBox):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (b.lo - o) * inv
        t2 = (b.hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    ok = (far >= near) & (far > 1e-9)
    t = np.where(ok, np.where(near > 1e-9, near, far), np.inf)
    axis = np.argmax(tmin, axis=1)
    n = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_plane(o, d, p: Plane):
    n = _unit(p.normal)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p.point - o) @ n) / denom
    t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
    # in-plane square of side 2 * half_extent
    helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = _unit(np.cross(n, helper))
    e2 = np.cross(n, e1)
    tf = np.where(np.isfinite(t), t, 0.0)
    rel = o + tf[:, None] * d - p.point
    inside = (np.abs(rel @ e1) <= p.half_extent) & (np.abs(rel @ e2) <= p.half_extent)
    t = np.where(inside, t, np.inf)
    normals = np.where((denom > 0)[:, None], -n, n)
    return t, np.broadcast_to(normals, d.shape)


_HITTERS = {Sphere: _hit_sphere, AxisAlignedBox: _hit_box, Plane: _hit_plane}


def camera_rays(camera: CameraModel, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions in the camera frame (h*w, 3) and in the world frame."""
    k = camera.intrinsics
    u, v = pixel_grid(h, w)
    dirs = np.stack([(u - k.cx) / k.focal, (v - k.cy) / k.focal, np.ones_like(u)], axis=-1)
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, dirs @ camera.pose.rotation.T


def raycast_view(scene, camera: CameraModel, h: int, w: int):
    """Render one view.

    Returns ``(depth, color, mask)`` where ``depth`` is the distance along each
    pixel-center ray to the nearest surface (0 where nothing is hit),
    ``color`` is Lambert-shaded albedo and ``mask`` marks hits.
    """
    if h < 8 or w < 8:
        raise ValueError("image must be at least 8x8")
    _, d = camera_rays(camera, h, w)
    o = camera.pose.translation
    best = np.full(h * w, np.inf)
    color = np.zeros((h * w, 3))
    for prim in scene:
        t, n = _HITTERS[type(prim.shape)](o, d, prim.shape)
        closer = t < best
        if not np.any(closer):
            continue
        best[closer] = t[closer]
        shade = AMBIENT + (1 - AMBIENT) * np.clip(n[closer] @ LIGHT_DIR, 0.0, 1.0)
        color[closer] = prim.albedo * shade[:, None]
    mask = np.isfinite(best)
    depth = np.where(mask, best, 0.0)
    return depth.reshape(h, w), np.clip(color, 0.0, 1.0).reshape(h, w, 3), mask.reshape(h, w)


def render_sample(scene, cameras: list[CameraModel], h: int, w: int) -> GroundTruthSample:
    """Render all views and build exact local and global pointmaps.

    ``cameras`` are given in the scene frame; the stored poses are re-expressed
    relative to the first camera.
    """
    if not cameras:
        raise ValueError("need at least one camera")
    anchor = invert(cameras[0].pose)
    images, local, glob, masks, cams = [], [], [], [], []
    for i, cam in enumerate(cameras):
        depth, color, mask = raycast_view(scene, cam, h, w)
        if not mask.any():
            raise EmptyView(f"view {i} sees nothing")
        dirs, _ = camera_rays(cam, h, w)
        pts = (dirs * depth.reshape(-1, 1)).reshape(h, w, 3)
        pose = RigidTransform.identity() if i == 0 else compose(anchor, cam.pose)
        g = pose.apply(pts)
        pts[~mask] = 0.0
        g[~mask] = 0.0
        images.append(color)
        local.append(pts)
        glob.append(g)
        masks.append(mask)
        cams.append(CameraModel(cam.intrinsics, pose))
    return GroundTruthSample(
        np.stack(images), np.stack(local), np.stack(glob), np.stack(masks), cams
    )


def make_sample(
    seed: int,
    n_views: int,
    h: int = 32,
    w: int = 32,
    fov_deg: float = 60.0,
    ring_radius: float = 3.0,
    scene_spec: SceneSpec | None = None,
) -> GroundTruthSample:
    """Scene + camera ring + render in one call, all derived from ``seed``."""
    scene = sample_scene(scene_spec or SceneSpec(rng_seed=seed))
    poses = sample_camera_ring(n_views, ring_radius, seed=seed + 7919, reexpress=False)
    focal = (w / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    k = CameraIntrinsics.centered(focal, h, w)
    return render_sample(scene, [CameraModel(k, p) for p in poses], h, w)


# --------------------------------------------------------------------------- dataset I/O


def write_dataset(samples: list[GroundTruthSample], path) -> None:
    """Write samples in the little-endian ``F3RDATA1`` format.

    Images and pointmaps are stored as float32, so reading back returns the
    float32-rounded values.
    """
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<II", DATA_VERSION, len(samples)))
        for s in samples:
            n, h, w = s.images.shape[:3]
            f.write(struct.pack("<III", n, h, w))
            for i in range(n):
                cam = s.cameras[i]
                head = np.concatenate(
                    [
                        cam.pose.rotation.reshape(-1),
                        cam.pose.translation,
                        [cam.intrinsics.focal, cam.intrinsics.cx, cam.intrinsics.cy],
                    ]
                )
                f.write(head.astype("<f8").tobytes())
                f.write(np.ascontiguousarray(s.images[i], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.local_points[i], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.global_points[i], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.masks[i], dtype="u1").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).reshape(shape).copy()


def read_dataset(path) -> list[GroundTruthSample]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(DATA_MAGIC)) != DATA_MAGIC:
        raise FormatError("bad dataset magic")
    version, count = r.unpack("<II")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    samples = []
    for _ in range(count):
        n, h, w = r.unpack("<III")
        imgs, loc, glob, masks, cams = [], [], [], [], []
        for _ in range(n):
            head = r.array("<f8", (15,)).astype(np.float64)
            pose = RigidTransform(head[:9].reshape(3, 3), head[9:12])
            cams.append(CameraModel(CameraIntrinsics(head[12], head[13], head[14]), pose))
            imgs.append(r.array("<f4", (h, w, 3)))
            loc.append(r.array("<f4", (h, w, 3)))
            glob.append(r.array("<f4", (h, w, 3)))
            masks.append(r.array("u1", (h, w)).astype(bool))
        samples.append(
            GroundTruthSample(
                np.stack(imgs).astype(np.float32) if n else np.zeros((0, h, w, 3), np.float32),
                np.stack(loc) if n else np.zeros((0, h, w, 3), np.float32),
                np.stack(glob) if n else np.zeros((0, h, w, 3), np.float32),
                np.stack(masks) if n else np.zeros((0, h, w), bool),
                cams,
            )
        )
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last sample")
    return samples
