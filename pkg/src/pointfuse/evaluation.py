"""Local-to-global alignment and evaluation metrics.

* weighted Umeyama similarity / rigid alignment
* per-view alignment of local pointmaps onto the global pointmap
* relative pose accuracy (RRA, RTA, mAA over 1..30 degrees)
* reconstruction accuracy / completion (median nearest-neighbour distance)
* multi-view depth error (rel in percent, inlier ratio tau in percent)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateConfiguration,
    EmptyCloud,
    NonPositiveGtDepth,
    ShapeError,
    TooFewViews,
)
from .geometry import (
    RigidTransform,
    SimilarityTransform,
    rotation_angle_deg,
    translation_angle_deg,
)

DEPTH_TAU_RATIO = 1.03
MAA_MAX_DEG = 30


def weighted_umeyama(src, dst, weights=None, with_scale: bool = True) -> SimilarityTransform:
    """Closed-form minimizer of ``sum w_i |s R src_i + t - dst_i|^2``.

    The rotation is always proper; a reflection in the SVD solution is
    corrected by flipping the sign of the smallest singular direction.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ShapeError(f"{src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if np.count_nonzero(w) < 3:
        raise DegenerateConfiguration("need at least 3 weighted correspondences")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    sc = src - mu_s
    dc = dst - mu_d
    cov = (dc * w[:, None]).T @ sc
    u, d, vt = np.linalg.svd(cov)
    var_s = w @ np.einsum("ij,ij->i", sc, sc)
    if var_s <= 1e-300 or d[0] <= 0 or d[1] <= 1e-12 * d[0]:
        raise DegenerateConfiguration("rank-deficient cross-covariance")
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rot = (u * s) @ vt
    scale = float((d * s).sum() / var_s) if with_scale else 1.0
    if not scale > 0:
        raise DegenerateConfiguration("non-positive scale")
    return SimilarityTransform(scale, rot, mu_d - scale * rot @ mu_s)


@dataclass
class AlignmentResult:
    transforms: list = field(default_factory=list)  # SimilarityTransform or None if skipped
    residual_rms: list = field(default_factory=list)  # float or None
    errors: dict = field(default_factory=dict)  # view -> exception


def align_view(local_pts, global_pts, weights=None, with_scale=False, trim_rounds=2, trim_factor=3.0):
    """Align one view's local points onto its global points (same-pixel correspondences).

    Returns ``(transform, rms, kept_mask)``. Each trimming round drops points
    whose residual exceeds ``trim_factor`` times the median residual; a round
    whose survivors are degenerate is discarded.
    """
    src = np.asarray(local_pts, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(global_pts, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    keep = np.ones(len(src), dtype=bool)
    tr = weighted_umeyama(src, dst, w, with_scale)
    scale_ref = max(np.abs(dst).max(), 1e-12)
    for _ in range(trim_rounds):
        res = np.linalg.norm(tr.apply(src) - dst, axis=1)
        cut = max(trim_factor * np.median(res[keep]), 1e-9 * scale_ref)
        new_keep = keep & (res <= cut)
        if new_keep.sum() < 3 or np.array_equal(new_keep, keep):
            break
        try:
            tr = weighted_umeyama(src[new_keep], dst[new_keep], w[new_keep], with_scale)
        except DegenerateConfiguration:
            break  # the survivors are degenerate; keep the previous fit
        keep = new_keep
    res = np.linalg.norm(tr.apply(src[keep]) - dst[keep], axis=1)
    return tr, float(np.sqrt(np.mean(res**2))), keep


def align_local_to_global(bundle, conf_weighting: bool = True, masks=None, with_scale: bool = False,
                          trim_rounds: int = 2):
    """Align every view's local pointmap to its global pointmap.

    Weights are the product of both heads' positive confidences when
    ``conf_weighting`` is set. Returns ``(merged_cloud, AlignmentResult)``;
    views whose alignment is degenerate are skipped and recorded in
    ``result.errors``.
    """
    n = bundle.n_views
    result = AlignmentResult()
    merged = []
    for i in range(n):
        m = np.ones(bundle.local_points.shape[1:3], dtype=bool) if masks is None else np.asarray(masks[i], bool)
        src = bundle.local_points[i][m]
        dst = bundle.global_points[i][m]
        w = None
        if conf_weighting:
            w = (1.0 + np.exp(np.asarray(bundle.local_conf[i], np.float64)[m])) * (
                1.0 + np.exp(np.asarray(bundle.global_conf[i], np.float64)[m])
            )
        try:
            tr, rms, _ = align_view(src, dst, w, with_scale, trim_rounds)
        except DegenerateConfiguration as e:
            result.transforms.append(None)
            result.residual_rms.append(None)
            result.errors[i] = e
            continue
        result.transforms.append(tr)
        result.residual_rms.append(rms)
        merged.append(tr.apply(src))
    cloud = np.concatenate(merged) if merged else np.zeros((0, 3))
    return cloud, result


# --------------------------------------------------------------------------- pose metrics


def _world_to_camera(pose) -> tuple[np.ndarray, np.ndarray]:
    pose = getattr(pose, "pose", pose)
    r = pose.rotation.T
    return r, -r @ pose.translation


def relative_pose_errors(pred_poses, gt_poses) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation-direction errors (degrees) over all pairs i < j.

    Poses are camera-to-world (``RigidTransform`` or ``CameraModel``); the
    relative motion from camera i to camera j is formed in world-to-camera
    form, ``R_ij = R_j R_i^T``, ``t_ij = t_j - R_ij t_i``.
    """
    if len(pred_poses) != len(gt_poses):
        raise ShapeError("prediction and ground-truth pose lists differ in length")
    if len(pred_poses) < 2:
        raise TooFewViews("relative pose metrics need at least 2 views")
    pw = [_world_to_camera(p) for p in pred_poses]
    gw = [_world_to_camera(p) for p in gt_poses]
    rot_err, trans_err = [], []
    for i, j in combinations(range(len(pw)), 2):
        rp = pw[j][0] @ pw[i][0].T
        rg = gw[j][0] @ gw[i][0].T
        tp = pw[j][1] - rp @ pw[i][1]
        tg = gw[j][1] - rg @ gw[i][1]
        rot_err.append(rotation_angle_deg(rp, rg))
        trans_err.append(translation_angle_deg(tp, tg))
    return np.array(rot_err), np.array(trans_err)


def pose_metrics(pred_poses, gt_poses, thresholds=(5, 15, 30)):
    """Returns ``(rra_at, rta_at, maa30)``; accuracies use strict ``<``."""
    rot, trans = relative_pose_errors(pred_poses, gt_poses)
    rra = {float(t): float(np.mean(rot < t)) for t in thresholds}
    rta = {float(t): float(np.mean(trans < t)) for t in thresholds}
    joint = np.maximum(rot, trans)
    maa = float(np.mean([np.mean(joint < t) for t in range(1, MAA_MAX_DEG + 1)]))
    return rra, rta, maa


# --------------------------------------------------------------------------- reconstruction


def nearest_distances(query, ref) -> np.ndarray:
    """Exact Euclidean distance from each query point to its nearest ref point."""
    d, _ = cKDTree(np.asarray(ref, np.float64)).query(np.asarray(query, np.float64), k=1, eps=0.0)
    return d


def reconstruction_metrics(pred_cloud, gt_cloud) -> tuple[float, float]:
    """``(accuracy, completion)`` as median nearest-neighbour distances."""
    pred = np.asarray(pred_cloud, np.float64).reshape(-1, 3)
    gt = np.asarray(gt_cloud, np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloud("reconstruction metrics need non-empty clouds")
    acc = float(np.median(nearest_distances(pred, gt)))
    comp = float(np.median(nearest_distances(gt, pred)))
    return acc, comp


def depth_metrics(pred_local, gt_local, masks) -> tuple[float, float]:
    """``(rel, tau)`` in percent, with depth = z of the local pointmaps."""
    pred = np.asarray(pred_local, np.float64)
    gt = np.asarray(gt_local, np.float64)
    masks = np.asarray(masks, bool)
    if pred.shape != gt.shape or masks.shape != gt.shape[:-1]:
        raise ShapeError("depth inputs disagree in shape")
    d = pred[..., 2][masks]
    ds = gt[..., 2][masks]
    if d.size == 0:
        raise EmptyCloud("no valid pixels")
    if np.any(ds <= 0):
        raise NonPositiveGtDepth("ground-truth depth must be positive")
    rel = float(np.mean(np.abs(d - ds) / ds) * 100.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d / ds, ds / d)
    ratio = np.where(d > 0, ratio, np.inf)
    tau = float(np.mean(ratio < DEPTH_TAU_RATIO) * 100.0)
    return rel, tau


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def __contains__(self, key):
        return key in self.values

    def add(self, name: str, value: float):
        self.values[name] = float(value)

    def to_lines(self) -> str:
        return "".join(f"metric={k} value={v!r}\n" for k, v in self.values.items())

    def table(self) -> str:
        width = max((len(k) for k in self.values), default=6)
        rows = [f"{'metric':<{width}}  value", "-" * (width + 14)]
        rows += [f"{k:<{width}}  {v:.6g}" for k, v in self.values.items()]
        return "\n".join(rows)

    @classmethod
    def from_lines(cls, text: str) -> "MetricReport":
        rep = cls()
        for line in text.splitlines():
            if line.strip():
                kv = dict(part.split("=", 1) for part in line.split())
                rep.add(kv["metric"], float(kv["value"]))
        return rep


def pose_report(pred_poses, gt_poses, thresholds=(5, 15, 30)) -> MetricReport:
    rra, rta, maa = pose_metrics(pred_poses, gt_poses, thresholds)
    rep = MetricReport()
    for t, v in rra.items():
        rep.add(f"rra@{t:g}", v)
    for t, v in rta.items():
        rep.add(f"rta@{t:g}", v)
    rep.add("maa30", maa)
    return rep


def rigid_from_similarity(t: SimilarityTransform) -> RigidTransform:
    return RigidTransform(t.rotation, t.translation)
