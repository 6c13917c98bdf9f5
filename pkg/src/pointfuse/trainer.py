"""AdamW training loop with warmup + cosine learning-rate schedule.

Every sample in a step draws its own image-index assignment, so the fusion
transformer sees random index subsets of the pool during training. All
randomness for step ``k`` comes from ``default_rng([seed, k])``; a run resumed
from a checkpoint therefore replays the remaining steps exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, DivergedError, NonFiniteActivation, NonFiniteGradient
from .losses import LossConfig, LossReport, loss_and_gradients
from .model import (
    ModelConfig,
    ParameterStore,
    Tape,
    backward,
    consecutive_assignment,
    forward,
    init_params,
    load_checkpoint,
    sample_index_assignment,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    warmup_steps: int | None = None  # None -> 5% of total_steps
    total_steps: int = 1000
    batch_size: int = 1
    views_per_sample: int = 4
    pool_size: int = 32
    alpha: float = 0.2
    confidence_reg_sign: int = 1
    seed: int = 0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    # "pool": random indices from 1..pool_size; "consecutive": 1..N (ablation)
    index_sampling: str = "pool"
    # "first": the first N views of each sample; "random": view 0 plus N-1 random others
    view_selection: str = "first"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.views_per_sample > self.pool_size:
            raise ValueError("views_per_sample must not exceed pool_size")
        if self.index_sampling not in ("pool", "consecutive"):
            raise ValueError("index_sampling must be 'pool' or 'consecutive'")
        if self.view_selection not in ("first", "random"):
            raise ValueError("view_selection must be 'first' or 'random'")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.05 * self.total_steps))

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.confidence_reg_sign)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterStore) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    warm, total = cfg.warmup, cfg.total_steps
    if warm > 0 and step < warm:
        return cfg.base_lr * step / warm
    if total <= warm:
        return cfg.base_lr
    progress = min(max((step - warm) / (total - warm), 0.0), 1.0)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: ParameterStore, grads: dict, state: OptimState, lr: float, cfg: TrainConfig) -> None:
    """In-place AdamW update with bias correction.

    Decoupled weight decay is applied to matrices only; biases and norm
    gains are not decayed.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = grads[k]
        if cfg.weight_decay and p.ndim >= 2:
            p -= lr * cfg.weight_decay * p
        m, v = state.m[k], state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    params.touch()


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``; return the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def select_views(sample, n: int, rng: np.random.Generator, mode: str):
    if sample.n_views == n:
        return sample
    if sample.n_views < n:
        raise ValueError(f"sample has {sample.n_views} views, {n} requested")
    if mode == "first":
        return sample.subset(range(n))
    others = rng.choice(np.arange(1, sample.n_views), size=n - 1, replace=False)
    return sample.subset([0] + sorted(int(i) for i in others))


def draw_assignment(n: int, cfg: TrainConfig, rng: np.random.Generator) -> list[int]:
    if cfg.index_sampling == "consecutive":
        return consecutive_assignment(n)
    return sample_index_assignment(n, cfg.pool_size, rng)


def _sample_grad(sample, params, model_cfg, cfg, rng):
    sample = select_views(sample, cfg.views_per_sample, rng, cfg.view_selection)
    assignment = draw_assignment(sample.n_views, cfg, rng)
    tape = Tape()
    try:
        bundle = forward(sample.images, assignment, params, model_cfg, tape=tape)
    except NonFiniteActivation as e:
        raise DivergedError(str(e)) from e
    report, bgrad = loss_and_gradients(bundle, sample, cfg.loss_config)
    if not np.isfinite(report.total):
        raise DivergedError(f"non-finite loss {report.total}")
    backward(bgrad, tape, params, model_cfg)
    return report


def train_step(batch, params: ParameterStore, state: OptimState, cfg: TrainConfig,
               model_cfg: ModelConfig, step: int) -> tuple[LossReport, float]:
    """One optimizer step on a list of samples; returns the mean report and the lr used."""
    rng = np.random.default_rng([cfg.seed, step])
    acc = {k: np.zeros_like(p) for k, p in params.items()}
    reports = []
    for sample in batch:
        reports.append(_sample_grad(sample, params, model_cfg, cfg, rng))
        for k, g in params.grads.items():
            acc[k] += g
    for g in acc.values():
        g /= len(batch)
    clip_grad_norm(acc, cfg.grad_clip_norm)
    lr = cosine_lr(step + 1, cfg)
    try:
        adamw_step(params, acc, state, lr, cfg)
    except NonFiniteGradient as e:
        raise DivergedError(str(e)) from e
    return _mean_report(reports), lr


def _mean_report(reports: list[LossReport]) -> LossReport:
    if len(reports) == 1:
        return reports[0]
    k = len(reports)
    out = LossReport(total=sum(r.total for r in reports) / k)
    out.global_terms = [sum(r.loss_global for r in reports) / k]
    out.local_terms = [sum(r.loss_local for r in reports) / k]
    out.regr_global = [float(np.mean([np.mean(r.regr_global) for r in reports]))]
    out.regr_local = [float(np.mean([np.mean(r.regr_local) for r in reports]))]
    return out


def format_log_row(step: int, lr: float, report: LossReport) -> str:
    return (f"step={step} lr={lr!r} loss_total={report.total!r} "
            f"loss_global={report.loss_global!r} loss_local={report.loss_local!r}")


def parse_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = dict(kv.split("=", 1) for kv in line.split())
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
    return rows


def save_training_checkpoint(path, model_cfg: ModelConfig, params: ParameterStore, state: OptimState) -> None:
    tensors = dict(params.params)
    for k in params.params:
        tensors[f"opt/m/{k}"] = state.m[k]
        tensors[f"opt/v/{k}"] = state.v[k]
    tensors["opt/step"] = np.array([state.step], dtype=np.float64)
    save_checkpoint(path, model_cfg, tensors)


def load_training_checkpoint(path) -> tuple[ModelConfig, ParameterStore, OptimState]:
    model_cfg, tensors = load_checkpoint(path)
    params = ParameterStore({k: v for k, v in tensors.items() if not k.startswith("opt/")})
    if "opt/step" in tensors:
        state = OptimState(
            {k: tensors[f"opt/m/{k}"].copy() for k in params.params},
            {k: tensors[f"opt/v/{k}"].copy() for k in params.params},
            int(tensors["opt/step"][0]),
        )
    else:
        state = OptimState.zeros(params)
    return model_cfg, params, state


def fit(dataset, cfg: TrainConfig, model_cfg: ModelConfig, params: ParameterStore | None = None,
        out_dir=None, resume_from=None, log_path=None, progress=None):
    """Run ``cfg.total_steps`` steps cycling through ``dataset``.

    Returns ``(params, rows)`` where ``rows`` are the log records. With
    ``out_dir``, checkpoints ``step_<k>.f3rckpt`` are written every
    ``checkpoint_every`` steps and at the end, and the log goes to
    ``out_dir/train.log`` unless ``log_path`` is given.
    """
    if not dataset:
        raise ValueError("empty dataset")
    start = 0
    if resume_from is not None:
        stored_cfg, params, state = load_training_checkpoint(resume_from)
        if stored_cfg != model_cfg:
            raise ConfigMismatch("resume checkpoint has a different model config")
        start = state.step
    else:
        params = params if params is not None else init_params(model_cfg, cfg.seed)
        state = OptimState.zeros(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out / "train.log"
    rows = []
    fh = None
    if log_path is not None:
        fh = open(log_path, "a" if resume_from is not None else "w")
    try:
        for step in range(start, cfg.total_steps):
            batch = [dataset[(step * cfg.batch_size + j) % len(dataset)] for j in range(cfg.batch_size)]
            report, lr = train_step(batch, params, state, cfg, model_cfg, step)
            row = {"step": step + 1, "lr": lr, "loss_total": report.total,
                   "loss_global": report.loss_global, "loss_local": report.loss_local}
            rows.append(row)
            line = format_log_row(step + 1, lr, report)
            log.info(line)
            if fh is not None:
                fh.write(line + "\n")
            if progress is not None:
                progress(row)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_training_checkpoint(out / f"step_{step + 1}.f3rckpt", model_cfg, params, state)
        if out is not None:
            save_training_checkpoint(out / f"step_{cfg.total_steps}.f3rckpt", model_cfg, params, state)
    finally:
        if fh is not None:
            fh.close()
    return params, rows
