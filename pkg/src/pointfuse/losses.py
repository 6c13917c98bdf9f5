"""Confidence-weighted, scale-normalized pointmap regression loss.

For one view with valid pixels ``X`` the prediction and target are each
divided by their mean distance to the origin, the per-pixel L2 distance of the
normalized points is weighted by ``1 + exp(conf)``, and a ``sign * alpha *
log(1 + exp(conf))`` term is added before averaging over the valid pixels. The
training objective sums this over views for both the local and the global
head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScale, EmptyMask, ShapeError

SCALE_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    confidence_reg_sign: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")
        if self.confidence_reg_sign not in (1, -1):
            raise ValueError("confidence_reg_sign must be +1 or -1")


@dataclass
class LossReport:
    total: float
    global_terms: list[float] = field(default_factory=list)
    local_terms: list[float] = field(default_factory=list)
    mean_conf_global: list[float] = field(default_factory=list)
    mean_conf_local: list[float] = field(default_factory=list)
    # plain mean of the normalized regression distance per view
    regr_global: list[float] = field(default_factory=list)
    regr_local: list[float] = field(default_factory=list)

    @property
    def loss_global(self) -> float:
        return float(sum(self.global_terms))

    @property
    def loss_local(self) -> float:
        return float(sum(self.local_terms))

    @property
    def regression(self) -> float:
        """Mean normalized regression distance over all views and both heads."""
        vals = self.regr_global + self.regr_local
        return float(np.mean(vals)) if vals else 0.0


def mean_euclidean_norm(points, mask=None) -> float:
    """Mean distance to the origin over the masked-in points."""
    pts = np.asarray(points, dtype=np.float64)
    if mask is None:
        mask = np.ones(pts.shape[:-1], dtype=bool)
    sel = pts[np.asarray(mask, dtype=bool)]
    if sel.shape[0] == 0:
        raise EmptyMask("no valid points")
    z = float(np.linalg.norm(sel, axis=-1).mean())
    if z < SCALE_EPS:
        raise DegenerateScale(f"mean norm {z} too small to normalize")
    return z


def normalized_regression_loss(pred, target, mask=None) -> np.ndarray:
    """Per-pixel distance between independently normalized point grids.

    Masked-out pixels get 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"{pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    zp = mean_euclidean_norm(pred, mask)
    zt = mean_euclidean_norm(target, mask)
    out = np.zeros(pred.shape[:-1])
    out[mask] = np.linalg.norm(pred[mask] / zp - target[mask] / zt, axis=-1)
    return out


def confidence_positive(raw) -> np.ndarray:
    return 1.0 + np.exp(np.asarray(raw, dtype=np.float64))


def _pointmap_terms(conf_raw, pred, target, mask, cfg: LossConfig, need_grad: bool):
    """Loss value (+ gradients w.r.t. pred and conf_raw) for one view."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    conf_raw = np.asarray(conf_raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or conf_raw.shape != pred.shape[:-1] or mask.shape != conf_raw.shape:
        raise ShapeError("pred / target / confidence / mask shapes disagree")
    xp = pred[mask]
    xt = target[mask]
    c = conf_raw[mask]
    m = xp.shape[0]
    if m == 0:
        raise EmptyMask("no valid points")
    np_norm = np.linalg.norm(xp, axis=1)
    zp = np_norm.mean()
    zt = np.linalg.norm(xt, axis=1).mean()
    if zp < SCALE_EPS or zt < SCALE_EPS:
        raise DegenerateScale("mean norm too small to normalize")
    u = xp / zp - xt / zt
    ell = np.linalg.norm(u, axis=1)
    ec = np.exp(c)
    sp = 1.0 + ec
    s_alpha = cfg.confidence_reg_sign * cfg.alpha
    value = float((sp * ell + s_alpha * np.log(sp)).sum() / m)
    stats = (float(ell.mean()), float(sp.mean()))
    if not need_grad:
        return value, stats, None, None
    # d/dconf: (ell * e^c + s_alpha * sigmoid(c)) / m
    dconf = np.zeros(conf_raw.shape)
    dconf[mask] = (ell * ec + s_alpha * ec / sp) / m
    safe = np.where(ell > 0, ell, 1.0)
    g = np.where((ell > 0)[:, None], (sp / safe)[:, None] * u, 0.0) / m  # dL/du
    # u_q depends on every x_p through zp = mean |x_p|
    coupling = (g * xp).sum() / zp**2
    unit = np.where((np_norm > 0)[:, None], xp / np.where(np_norm > 0, np_norm, 1.0)[:, None], 0.0)
    dxp = g / zp - coupling * unit / m
    dpred = np.zeros(pred.shape)
    dpred[mask] = dxp
    return value, stats, dpred, dconf


def pointmap_loss(conf_raw, pred, target, mask, cfg: LossConfig = LossConfig()) -> float:
    value, _, _, _ = _pointmap_terms(conf_raw, pred, target, mask, cfg, need_grad=False)
    return value


def pointmap_loss_and_grad(conf_raw, pred, target, mask, cfg: LossConfig = LossConfig()):
    """Returns ``(loss, d_loss/d_pred, d_loss/d_conf_raw)``."""
    value, _, dpred, dconf = _pointmap_terms(conf_raw, pred, target, mask, cfg, need_grad=True)
    return value, dpred, dconf


def _check_pair(bundle, gt):
    if bundle.local_points.shape != gt.local_points.shape:
        raise ShapeError(
            f"prediction {bundle.local_points.shape} vs ground truth {gt.local_points.shape}"
        )


def _run(bundle, gt, cfg: LossConfig, need_grad: bool):
    from .model import PredictionBundle

    _check_pair(bundle, gt)
    n = bundle.n_views
    report = LossReport(total=0.0)
    grads = {}
    for head, target_all, terms, confs, regr in (
        ("global", gt.global_points, report.global_terms, report.mean_conf_global, report.regr_global),
        ("local", gt.local_points, report.local_terms, report.mean_conf_local, report.regr_local),
    ):
        dp = np.zeros(bundle.points(head).shape)
        dc = np.zeros(bundle.conf(head).shape)
        for i in range(n):
            value, (ell_mean, sp_mean), gp, gc = _pointmap_terms(
                bundle.conf(head)[i], bundle.points(head)[i], target_all[i], gt.masks[i], cfg, need_grad
            )
            terms.append(value)
            confs.append(sp_mean)
            regr.append(ell_mean)
            if need_grad:
                dp[i] = gp
                dc[i] = gc
        grads[head] = (dp, dc)
    report.total = float(sum(report.global_terms) + sum(report.local_terms))
    if not need_grad:
        return report, None
    return report, PredictionBundle(grads["local"][0], grads["local"][1], grads["global"][0], grads["global"][1])


def total_loss(bundle, gt, cfg: LossConfig = LossConfig()) -> LossReport:
    """Sum of per-view global and local pointmap losses."""
    report, _ = _run(bundle, gt, cfg, need_grad=False)
    return report


def loss_and_gradients(bundle, gt, cfg: LossConfig = LossConfig()):
    """``(LossReport, PredictionBundle of gradients)`` in float64."""
    return _run(bundle, gt, cfg, need_grad=True)


def loss_gradients(bundle, gt, cfg: LossConfig = LossConfig()):
    return _run(bundle, gt, cfg, need_grad=True)[1]
