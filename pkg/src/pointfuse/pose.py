"""Camera recovery from predicted global pointmaps.

Pipeline per view: keep the most confident pixels, sweep a set of focal
lengths, run RANSAC-PnP (Grunert P3P + Gauss-Newton refinement) for each and
keep the focal with the fewest outliers. Pixel ``(i, j)`` is paired with the
global 3D point stored at that pixel.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NoConsensus, PointfuseError, TooFewPoints
from .evaluation import weighted_umeyama
from .geometry import CameraIntrinsics, CameraModel, RigidTransform, pixel_grid, so3_exp

MIN_INLIERS = 6


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 512
    threshold_px: float = 2.0
    min_sample: int = 3
    confidence_fraction: float = 0.15
    focal_candidate_count: int = 16
    seed: int = 0
    refine_iterations: int = 10
    # stop early once an all-inlier sample has been drawn with this probability
    stop_probability: float = 0.999
    min_iterations: int = 32
    refine_focal: bool = True
    fov_min_deg: float = 25.0
    fov_max_deg: float = 120.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.threshold_px > 0:
            raise ValueError("threshold_px must be positive")
        if not 0 < self.confidence_fraction <= 1:
            raise ValueError("confidence_fraction must lie in (0, 1]")
        if self.focal_candidate_count < 1:
            raise ValueError("focal_candidate_count must be >= 1")


@dataclass
class PoseEstimate:
    camera: CameraModel  # camera-to-world
    inlier_count: int
    outlier_count: int
    focal_score: int
    inliers: np.ndarray | None = None  # bool over the filtered correspondences


# --------------------------------------------------------------------------- selection


def confidence_top_fraction(conf, mask, fraction: float) -> np.ndarray:
    """Boolean grid marking the ``ceil(fraction * valid)`` most confident valid pixels.

    At least 3 pixels are kept. Equal confidences are ranked in row-major order.
    """
    conf = np.asarray(getattr(conf, "raw", conf), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(mask.ravel())
    k = max(math.ceil(fraction * valid.size - 1e-9), 3)
    if valid.size < k:
        raise TooFewPoints(f"{valid.size} valid pixels, need {k}")
    order = np.lexsort((valid, -conf.ravel()[valid]))  # stable: confidence desc, then index
    out = np.zeros(mask.size, dtype=bool)
    out[valid[order[:k]]] = True
    return out.reshape(mask.shape)


def fov_to_focal(fov_deg, w: int):
    return (w / 2.0) / np.tan(np.deg2rad(np.asarray(fov_deg, dtype=np.float64)) / 2.0)


def candidate_fovs(count: int, lo: float = 25.0, hi: float = 120.0) -> np.ndarray:
    if count == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, count)


def focal_candidates(h: int, w: int, count: int, lo: float = 25.0, hi: float = 120.0) -> np.ndarray:
    """Focals for horizontal FOVs evenly spaced in ``[lo, hi]`` degrees (decreasing)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return fov_to_focal(candidate_fovs(count, lo, hi), w)


# --------------------------------------------------------------------------- P3P


def _bearings(px, k: CameraIntrinsics) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    b = np.stack([(px[:, 0] - k.cx) / k.focal, (px[:, 1] - k.cy) / k.focal, np.ones(len(px))], axis=1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _polish(coeffs, x, iters=3):
    d = np.polyder(coeffs)
    for _ in range(iters):
        fd = np.polyval(d, x)
        if fd == 0:
            break
        x = x - np.polyval(coeffs, x) / fd
    return x


def _polish_depths(d, sq, cosines, iters=3):
    """Newton steps on the three law-of-cosines equations for the ray depths."""
    a2, b2, c2 = sq
    ca, cb, cg = cosines

    def resid(d):
        d1, d2, d3 = d
        return np.array([d2 * d2 + d3 * d3 - 2 * d2 * d3 * ca - a2,
                         d1 * d1 + d3 * d3 - 2 * d1 * d3 * cb - b2,
                         d1 * d1 + d2 * d2 - 2 * d1 * d2 * cg - c2])

    r = resid(d)
    for _ in range(iters):
        d1, d2, d3 = d
        jac = 2 * np.array([[0.0, d2 - d3 * ca, d3 - d2 * ca],
                            [d1 - d3 * cb, 0.0, d3 - d1 * cb],
                            [d1 - d2 * cg, d2 - d1 * cg, 0.0]])
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            break
        cand = d - step
        rc = resid(cand)
        if not np.abs(rc).max() < np.abs(r).max():
            break
        d, r = cand, rc
    return d


def solve_p3p(pts3d, px, k: CameraIntrinsics) -> list[RigidTransform]:
    """Grunert's P3P: all camera-to-world poses that map 3 world points onto 3 pixels."""
    pw = np.asarray(pts3d, dtype=np.float64).reshape(3, 3)
    j = _bearings(np.asarray(px, dtype=np.float64).reshape(3, 2), k)
    scale = max(np.abs(pw - pw.mean(axis=0)).max(), 1e-300)
    area = np.linalg.norm(np.cross(pw[1] - pw[0], pw[2] - pw[0]))
    if area <= 1e-10 * scale**2:
        raise DegenerateConfiguration("collinear or coincident world points")
    a2 = np.sum((pw[1] - pw[2]) ** 2)
    b2 = np.sum((pw[0] - pw[2]) ** 2)
    c2 = np.sum((pw[0] - pw[1]) ** 2)
    ca = j[1] @ j[2]
    cb = j[0] @ j[2]
    cg = j[0] @ j[1]
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    coeffs = np.array([
        (amc - 1) ** 2 - 4 * c2 / b2 * ca**2,
        4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb),
        2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
             - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2),
        4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg),
        (1 + amc) ** 2 - 4 * a2 / b2 * cg**2,
    ])
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max() == 0:
        raise DegenerateConfiguration("degenerate P3P polynomial")
    lead = np.flatnonzero(np.abs(coeffs) > 1e-14 * np.abs(coeffs).max())
    roots = np.roots(coeffs[lead[0]:])
    sols = []
    for r in roots:
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = _polish(coeffs, r.real)
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        q = 1 + v * v - 2 * v * cb
        if u <= 0 or q <= 0:
            continue
        s1 = math.sqrt(b2 / q)
        depths = _polish_depths(np.array([s1, u * s1, v * s1]), (a2, b2, c2), (ca, cb, cg))
        pc = depths[:, None] * j
        try:
            w2c = weighted_umeyama(pw, pc, with_scale=False)
        except DegenerateConfiguration:
            continue
        r_w2c, t_w2c = w2c.rotation, w2c.translation
        cam = pw @ r_w2c.T + t_w2c
        if np.any(cam[:, 2] <= 0):
            continue
        proj = np.stack([k.focal * cam[:, 0] / cam[:, 2] + k.cx, k.focal * cam[:, 1] / cam[:, 2] + k.cy], 1)
        if np.abs(proj - np.asarray(px, dtype=np.float64).reshape(3, 2)).max() > 1e-6:
            continue
        sols.append(RigidTransform(r_w2c.T, -r_w2c.T @ t_w2c))
    return sols[:4]


# --------------------------------------------------------------------------- RANSAC + refinement


def _reproject(pts3d, r_w2c, t_w2c, k: CameraIntrinsics):
    cam = pts3d @ r_w2c.T + t_w2c
    z = cam[:, 2]
    ok = z > 1e-12
    zs = np.where(ok, z, 1.0)
    uv = np.stack([k.focal * cam[:, 0] / zs + k.cx, k.focal * cam[:, 1] / zs + k.cy], axis=1)
    return uv, ok, cam


def reprojection_errors(pts3d, px, pose: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Pixel errors; points behind the camera get ``inf``."""
    r = pose.rotation.T
    t = -r @ pose.translation
    uv, ok, _ = _reproject(np.asarray(pts3d, np.float64), r, t, k)
    err = np.linalg.norm(uv - px, axis=1)
    return np.where(ok, err, np.inf)


def refine_pose(pts3d, px, pose: RigidTransform, k: CameraIntrinsics, iterations: int = 10,
                refine_focal: bool = False, focal_bounds=(0.0, np.inf)):
    """Gauss-Newton (lightly damped) on squared reprojection error.

    Returns ``(pose, intrinsics)``; the focal only moves when ``refine_focal``
    and never leaves ``focal_bounds``.
    """
    pts3d = np.asarray(pts3d, np.float64)
    px = np.asarray(px, np.float64)
    r = pose.rotation.T.copy()
    t = -r @ pose.translation
    f = k.focal
    npar = 7 if refine_focal else 6

    def cost(r_, t_, f_):
        uv, ok, _ = _reproject(pts3d, r_, t_, CameraIntrinsics(f_, k.cx, k.cy))
        if not np.all(ok):
            return np.inf
        return float(np.sum((uv - px) ** 2))

    cur = cost(r, t, f)
    lam = 1e-6
    for _ in range(iterations):
        kk = CameraIntrinsics(f, k.cx, k.cy)
        uv, ok, cam = _reproject(pts3d, r, t, kk)
        if not np.all(ok):
            break
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        res = (uv - px).reshape(-1)
        # d(u,v)/d(cam)
        du = np.stack([f / z, np.zeros_like(z), -f * x / z**2], axis=1)
        dv = np.stack([np.zeros_like(z), f / z, -f * y / z**2], axis=1)
        # cam = exp(w) R X + t, d cam / d w = -[cam - t]_x
        p = cam - t
        skew = np.zeros((len(p), 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = -p[:, 2], p[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = p[:, 2], -p[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = -p[:, 1], p[:, 0]
        jw_u = -np.einsum("ni,nij->nj", du, skew)
        jw_v = -np.einsum("ni,nij->nj", dv, skew)
        ju = [jw_u, du]
        jv = [jw_v, dv]
        if refine_focal:
            ju.append((x / z)[:, None])
            jv.append((y / z)[:, None])
        jac = np.empty((2 * len(p), npar))
        jac[0::2] = np.concatenate(ju, axis=1)
        jac[1::2] = np.concatenate(jv, axis=1)
        h = jac.T @ jac
        g = jac.T @ res
        improved = False
        for _ in range(8):
            try:
                step = -np.linalg.solve(h + lam * np.diag(np.diag(h) + 1e-12), g)
            except np.linalg.LinAlgError:
                break
            r_new = so3_exp(step[:3]) @ r
            t_new = t + step[3:6]
            f_new = f + step[6] if refine_focal else f
            if not (f_new > 0 and focal_bounds[0] <= f_new <= focal_bounds[1]):
                lam *= 10
                continue
            c = cost(r_new, t_new, f_new)
            if c <= cur:
                r, t, f, cur = r_new, t_new, f_new, c
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved:
            break
    u_, s_, vt_ = np.linalg.svd(r)
    r = u_ @ vt_
    return RigidTransform(r.T, -r.T @ t), CameraIntrinsics(f, k.cx, k.cy)


def _needed_iterations(inlier_ratio: float, p: float, sample: int) -> float:
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0:
        return math.inf
    denom = math.log(1 - inlier_ratio**sample)
    return math.log(1 - p) / denom if denom < 0 else math.inf


def ransac_pnp(pts3d, px, k: CameraIntrinsics, cfg: RansacConfig = RansacConfig(),
               refine_focal: bool = False, focal_bounds=(0.0, np.inf)) -> tuple[PoseEstimate, CameraIntrinsics]:
    """Robust PnP; returns the estimate and the (possibly refined) intrinsics."""
    pts3d = np.asarray(pts3d, np.float64).reshape(-1, 3)
    px = np.asarray(px, np.float64).reshape(-1, 2)
    n = len(pts3d)
    if n < cfg.min_sample + 1:
        raise TooFewPoints(f"{n} correspondences, need at least {cfg.min_sample + 1}")
    spread = np.abs(pts3d - pts3d.mean(axis=0)).max()
    if spread <= 1e-12 * max(1.0, np.abs(pts3d).max()):
        raise DegenerateConfiguration("all 3D points coincide")
    rng = np.random.default_rng(cfg.seed)
    best = None
    best_key = (-1, 0.0)
    it = 0
    needed = cfg.iterations
    thr2 = cfg.threshold_px**2
    while it < min(cfg.iterations, max(needed, cfg.min_iterations)):
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        try:
            sols = solve_p3p(pts3d[idx], px[idx], k)
        except DegenerateConfiguration:
            continue
        for pose in sols:
            err = reprojection_errors(pts3d, px, pose, k)
            cnt = int(np.count_nonzero(err < cfg.threshold_px))
            # equal inlier counts are ranked by truncated squared error
            key = (cnt, -float(np.minimum(err**2, thr2).sum()))
            if key > best_key:
                best, best_key = pose, key
                needed = _needed_iterations(cnt / n, cfg.stop_probability, 3)
    best_count = best_key[0]
    if best is None or best_count < MIN_INLIERS:
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} inliers")
    inl = reprojection_errors(pts3d, px, best, k) < cfg.threshold_px
    kk = k
    pose = best
    for focal_pass in (False, True) if refine_focal else (False,):
        cand, ck = refine_pose(pts3d[inl], px[inl], pose, kk, cfg.refine_iterations, focal_pass, focal_bounds)
        cerr = reprojection_errors(pts3d, px, cand, ck)
        cinl = cerr < cfg.threshold_px
        if cinl.sum() >= inl.sum():
            pose, kk, inl = cand, ck, cinl
    cnt = int(inl.sum())
    if cnt < MIN_INLIERS:
        raise NoConsensus(f"{cnt} inliers after refinement")
    est = PoseEstimate(CameraModel(kk, pose), cnt, n - cnt, n - cnt, inl)
    return est, kk


def correspondences(global_points, conf, mask, fraction: float):
    """Pixels and 3D points of the confident valid subset of one view."""
    pts = np.asarray(global_points, np.float64)
    h, w = pts.shape[:2]
    mask = np.ones((h, w), bool) if mask is None else np.asarray(mask, bool)
    mask = mask & np.all(np.isfinite(pts), axis=-1)
    sel = confidence_top_fraction(conf, mask, fraction)
    u, v = pixel_grid(h, w)
    return pts[sel], np.stack([u[sel], v[sel]], axis=1)


def best_candidate(outlier_counts, fovs, mid_fov: float) -> int:
    """Index of the fewest-outlier candidate; ties go to the FOV closest to ``mid_fov``."""
    keys = [(int(o), abs(float(f) - mid_fov)) for o, f in zip(outlier_counts, fovs)]
    return min(range(len(keys)), key=keys.__getitem__)


def estimate_camera(global_points, conf, mask, cfg: RansacConfig = RansacConfig(),
                    fixed_focal: float | None = None) -> PoseEstimate:
    """Pose (and focal, unless fixed) of one view from its global pointmap."""
    pts = np.asarray(global_points, np.float64)
    h, w = pts.shape[:2]
    p3, p2 = correspondences(pts, conf, mask, cfg.confidence_fraction)
    if fixed_focal is not None:
        est, _ = ransac_pnp(p3, p2, CameraIntrinsics.centered(fixed_focal, h, w), cfg)
        return est
    fovs = candidate_fovs(cfg.focal_candidate_count, cfg.fov_min_deg, cfg.fov_max_deg)
    mid = (cfg.fov_min_deg + cfg.fov_max_deg) / 2.0
    scored = []
    for fov in fovs:
        k = CameraIntrinsics.centered(float(fov_to_focal(fov, w)), h, w)
        try:
            est, _ = ransac_pnp(p3, p2, k, cfg)
        except (NoConsensus, DegenerateConfiguration):
            continue
        scored.append((est.outlier_count, float(fov), est))
    if not scored:
        raise NoConsensus("no focal candidate reached consensus")
    best = best_candidate([s[0] for s in scored], [s[1] for s in scored], mid)
    outliers, fov, est = scored[best]
    if cfg.refine_focal:
        k = CameraIntrinsics.centered(float(fov_to_focal(fov, w)), h, w)
        try:
            bounds = (float(fov_to_focal(cfg.fov_max_deg, w)), float(fov_to_focal(cfg.fov_min_deg, w)))
            refined, _ = ransac_pnp(p3, p2, k, cfg, refine_focal=True, focal_bounds=bounds)
            if refined.outlier_count <= outliers:
                est = refined
        except (NoConsensus, DegenerateConfiguration):
            pass
    est.focal_score = outliers
    return est


def estimate_all_cameras(bundle, cfg: RansacConfig = RansacConfig(), shared_camera: bool = True,
                         masks=None, jobs: int = 1) -> list:
    """Estimate every view's camera from the global head of ``bundle``.

    Returns one entry per view: a :class:`PoseEstimate`, or the exception
    that stopped that view. With ``shared_camera`` the first view's focal is
    reused for all other views (falling back to a per-view sweep if the
    first view fails).
    """
    n = bundle.n_views
    pts = bundle.global_points
    conf = bundle.global_conf

    def mask_of(i):
        return None if masks is None else masks[i]

    def run(i, focal=None):
        try:
            return estimate_camera(pts[i], conf[i], mask_of(i), cfg, focal)
        except PointfuseError as e:
            return e

    results = [None] * n
    results[0] = run(0)
    focal = None
    if shared_camera and isinstance(results[0], PoseEstimate):
        focal = results[0].camera.intrinsics.focal
    rest = list(range(1, n))
    if jobs > 1 and len(rest) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, r in zip(rest, pool.map(lambda i: run(i, focal), rest)):
                results[i] = r
    else:
        for i in rest:
            results[i] = run(i, focal)
    return results


def format_pose_file(results) -> str:
    lines = ["# poses are camera-to-world; world = frame of view 0\n"]
    for i, r in enumerate(results):
        if not isinstance(r, PoseEstimate):
            lines.append(f"# view={i} failed: {type(r).__name__}: {r}\n")
            continue
        k = r.camera.intrinsics
        rot = " ".join(repr(float(x)) for x in r.camera.pose.rotation.ravel())
        t = " ".join(repr(float(x)) for x in r.camera.pose.translation)
        lines.append(
            f"view={i} f={float(k.focal)!r} cx={float(k.cx)!r} cy={float(k.cy)!r} R={rot} t={t} "
            f"inliers={r.inlier_count} outliers={r.outlier_count}\n"
        )
    return "".join(lines)


def parse_pose_file(text: str) -> dict[int, CameraModel]:
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        toks = line.split()
        vals = {}
        key = None
        for tok in toks:
            if "=" in tok:
                key, val = tok.split("=", 1)
                vals[key] = [val]
            else:
                vals[key].append(tok)
        rot = np.array([float(x) for x in vals["R"]]).reshape(3, 3)
        t = np.array([float(x) for x in vals["t"]])
        k = CameraIntrinsics(float(vals["f"][0]), float(vals["cx"][0]), float(vals["cy"][0]))
        out[int(vals["view"][0])] = CameraModel(k, RigidTransform(rot, t))
    return out
