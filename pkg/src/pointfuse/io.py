"""Prediction files and PLY export."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, FormatError
from .geometry import CONF_CLAMP
from .model import PredictionBundle
from .synthgen import _Reader

PRED_MAGIC = b"F3RPRED1"
PRED_VERSION = 1


@dataclass
class PredictionRecord:
    """One inferred sample: the bundle plus the inputs needed downstream."""

    bundle: PredictionBundle
    images: np.ndarray  # (N, H, W, 3)
    assignment: list[int]


def ground_truth_predictions(samples) -> list[PredictionRecord]:
    """Wrap ground-truth samples as predictions.

    Confidence logits are 0 on valid pixels and the minimum (-20) on pixels
    with no geometry. Used to run the evaluation commands on exact geometry.
    """
    out = []
    for s in samples:
        conf = np.where(s.masks, 0.0, -CONF_CLAMP).astype(np.float32)
        bundle = PredictionBundle(s.local_points, conf, s.global_points, conf.copy())
        out.append(PredictionRecord(bundle, s.images, list(range(1, s.n_views + 1))))
    return out


def write_predictions(records: list[PredictionRecord], path) -> None:
    """Little-endian: magic, u32 version, u32 count; per sample u32 N, H, W,
    then per view u32 index, image, local xyz, local conf, global xyz,
    global conf (all f32)."""
    with open(path, "wb") as f:
        f.write(PRED_MAGIC)
        f.write(struct.pack("<II", PRED_VERSION, len(records)))
        for rec in records:
            b = rec.bundle
            n, h, w = b.local_points.shape[:3]
            f.write(struct.pack("<III", n, h, w))
            for i in range(n):
                f.write(struct.pack("<I", rec.assignment[i]))
                for arr in (rec.images[i], b.local_points[i], b.local_conf[i], b.global_points[i], b.global_conf[i]):
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_predictions(path) -> list[PredictionRecord]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(PRED_MAGIC)) != PRED_MAGIC:
        raise FormatError("bad prediction-file magic")
    version, count = r.unpack("<II")
    if version != PRED_VERSION:
        raise FormatError(f"unsupported prediction-file version {version}")
    out = []
    for _ in range(count):
        n, h, w = r.unpack("<III")
        idx, imgs, lp, lc, gp, gc = [], [], [], [], [], []
        for _ in range(n):
            idx.append(r.unpack("<I")[0])
            imgs.append(r.array("<f4", (h, w, 3)))
            lp.append(r.array("<f4", (h, w, 3)))
            lc.append(r.array("<f4", (h, w)))
            gp.append(r.array("<f4", (h, w, 3)))
            gc.append(r.array("<f4", (h, w)))
        bundle = PredictionBundle(np.stack(lp), np.stack(lc), np.stack(gp), np.stack(gc))
        out.append(PredictionRecord(bundle, np.stack(imgs), idx))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes in prediction file")
    return out


def write_ply(path, points, colors=None) -> None:
    """Binary little-endian PLY with float xyz and uchar rgb per vertex.

    ``colors`` may be floats in [0, 1] or uint8; missing colors are white.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("refusing to write an empty point cloud")
    if colors is None:
        rgb = np.full((len(pts), 3), 255, dtype=np.uint8)
    else:
        c = np.asarray(colors).reshape(-1, 3)
        rgb = c if c.dtype == np.uint8 else np.clip(np.round(c * 255.0), 0, 255).astype(np.uint8)
    vert = np.empty(len(pts), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                     ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    vert["x"], vert["y"], vert["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    vert["red"], vert["green"], vert["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vert.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a PLY written by :func:`write_ply`; returns ``(xyz float32, rgb uint8)``."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError("only binary little-endian PLY is supported")
    count = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * dt.itemsize:
        raise FormatError("PLY body size does not match vertex count")
    vert = np.frombuffer(body, dtype=dt)
    xyz = np.stack([vert["x"], vert["y"], vert["z"]], axis=1)
    rgb = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1)
    return xyz, rgb
