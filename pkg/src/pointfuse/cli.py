"""Command-line entry point: ``pointfuse <command> [options]``.

Exit codes: 0 success, 2 usage/config error, 3 numerical divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import errors
from .config import RunConfig, load_config, with_seed
from .evaluation import (
    MetricReport,
    align_local_to_global,
    depth_metrics,
    reconstruction_metrics,
    relative_pose_errors,
    weighted_umeyama,
)
from .geometry import CameraModel, RigidTransform
from .io import PredictionRecord, read_predictions, write_ply, write_predictions
from .model import (
    ModelConfig,
    PredictionBundle,
    consecutive_assignment,
    forward,
    load_params,
    sample_index_assignment,
)
from .pose import PoseEstimate, estimate_all_cameras, format_pose_file
from .synthgen import DATA_MAGIC, EmptyView, SceneSpec, make_sample, read_dataset, write_dataset
from .trainer import fit, parse_log

log = logging.getLogger("pointfuse")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


# --------------------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, out_path) -> list:
    """Render ``n_scenes`` samples and write them to ``out_path``.

    A scene is redrawn (new seed) when a view is empty or shows less than
    ``min_view_coverage`` foreground.
    """
    d = cfg.data
    samples = []
    for i in range(d.n_scenes):
        attempt = 0
        while True:
            seed = d.seed * 1_000_003 + i + attempt * 7_777_777
            spec = SceneSpec(d.min_primitives, d.max_primitives, d.extent, seed, d.ground_plane)
            try:
                s = make_sample(seed, d.n_views, d.height, d.width, d.fov_deg, d.ring_radius, spec)
            except EmptyView:
                attempt += 1
                continue
            if s.masks.mean(axis=(1, 2)).min() < d.min_view_coverage:
                attempt += 1
                continue
            samples.append(s)
            break
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out_path)
    print(f"wrote {len(samples)} samples x {d.n_views} views ({d.height}x{d.width}) to {out_path}")
    return samples


def cmd_train(cfg: RunConfig, dataset_path, out_dir, resume=None, views_sweep=None):
    data = read_dataset(dataset_path)
    if not data:
        raise errors.ConfigError("dataset is empty")
    out_dir = Path(out_dir)
    if views_sweep:
        summary = {}
        for n in views_sweep:
            tc = replace(cfg.train, views_per_sample=n)
            mc = replace(cfg.model, max_train_views=max(n, 1))
            _, rows = fit(data, tc, mc, out_dir=out_dir / f"views_{n}")
            summary[n] = rows[-1]["loss_total"] if rows else float("nan")
            print(f"views={n} final_loss={summary[n]:.6g}")
        return summary
    params, rows = fit(data, cfg.train, cfg.model, out_dir=out_dir, resume_from=resume)
    if rows:
        print(f"trained {len(rows)} steps: loss {rows[0]['loss_total']:.6g} -> {rows[-1]['loss_total']:.6g}")
    print(f"checkpoint: {out_dir / f'step_{cfg.train.total_steps}.f3rckpt'}")
    return params, rows


def make_assignment(n: int, config: ModelConfig, mode: str, rng) -> list[int]:
    if mode == "consecutive":
        if n > config.pool_size:
            raise errors.PoolTooSmall(f"{n} views exceed pool size {config.pool_size}")
        return consecutive_assignment(n)
    return sample_index_assignment(n, config.pool_size, rng)


def cmd_infer(checkpoint, dataset_path, out_dir, n_views=None, seed=0, index_mode="pool", jobs=1):
    """One forward pass per sample; writes ``predictions.f3rpred``."""
    config, params = load_params(checkpoint)
    data = read_dataset(dataset_path)
    records = []
    for s_idx, sample in enumerate(data):
        n = sample.n_views if n_views is None else n_views
        if n > config.pool_size:
            raise errors.PoolTooSmall(f"{n} views exceed pool size {config.pool_size}")
        if n > sample.n_views:
            raise errors.SchemaError(f"sample {s_idx} has {sample.n_views} views, {n} requested")
        rng = np.random.default_rng([seed, s_idx])
        assignment = make_assignment(n, config, index_mode, rng)
        images = sample.images[:n]
        bundle = forward(images, assignment, params, config, jobs=jobs)
        records.append(PredictionRecord(bundle, images, assignment))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(records, out / "predictions.f3rpred")
    print(f"wrote predictions for {len(records)} samples to {out / 'predictions.f3rpred'}")
    return records


def _paired(pred_path, gt_path):
    preds = read_predictions(pred_path)
    gts = read_dataset(gt_path)
    if len(preds) != len(gts):
        raise errors.SchemaError(f"{len(preds)} predicted samples vs {len(gts)} ground-truth samples")
    pairs = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        n = p.bundle.n_views
        if g.n_views != n:
            raise errors.SchemaError(f"sample {i}: {n} predicted views vs {g.n_views} ground-truth views")
        if p.bundle.local_points.shape[1:3] != g.hw:
            raise errors.SchemaError(f"sample {i}: image size mismatch")
        pairs.append((p, g))
    return pairs


def cmd_eval_pose(pred_path, gt_path, cfg: RunConfig, out_dir=None, shared_camera=True, jobs=1) -> MetricReport:
    """Recover cameras from predicted global pointmaps and score relative poses.

    Only ground-truth foreground pixels are used: background pixels have no
    geometry to be right about.
    """
    pairs = _paired(pred_path, gt_path)
    rot, trans = [], []
    failed = 0
    pose_text = []
    for s_idx, (p, g) in enumerate(pairs):
        if p.bundle.n_views < 2:
            raise errors.TooFewViews(f"sample {s_idx} has a single view")
        results = estimate_all_cameras(p.bundle, cfg.ransac, shared_camera, masks=g.masks, jobs=jobs)
        poses = []
        for r in results:
            if isinstance(r, PoseEstimate):
                poses.append(r.camera.pose)
            else:
                failed += 1
                poses.append(RigidTransform.identity())
        re, te = relative_pose_errors(poses, g.cameras)
        rot.append(re)
        trans.append(te)
        pose_text.append(f"# sample={s_idx}\n" + format_pose_file(results))
    rot = np.concatenate(rot)
    trans = np.concatenate(trans)
    rep = MetricReport()
    for t in (5, 15, 30):
        rep.add(f"rra@{t}", np.mean(rot < t))
    for t in (5, 15, 30):
        rep.add(f"rta@{t}", np.mean(trans < t))
    joint = np.maximum(rot, trans)
    rep.add("maa30", np.mean([np.mean(joint < t) for t in range(1, 31)]))
    rep.add("failed_views", failed)
    _emit(rep, out_dir, "pose_metrics.txt")
    if out_dir is not None:
        (Path(out_dir) / "poses.txt").write_text("".join(pose_text))
    return rep


def _sim_to_gt(pred_pts, gt_pts):
    tr = weighted_umeyama(pred_pts, gt_pts, with_scale=True)
    return tr.apply(pred_pts)


def cmd_eval_recon(pred_path, gt_path, out_dir=None) -> MetricReport:
    """Acc/Comp of raw global vs. local-aligned-to-global reconstructions, plus depth rel/tau.

    Predictions are scale-free, so each reconstruction is similarity-aligned
    to the ground truth (pixel correspondences) before measuring distances,
    and each view's depth is median-scaled before rel/tau.
    """
    pairs = _paired(pred_path, gt_path)
    acc_g, comp_g, acc_l, comp_l, rels, taus = [], [], [], [], [], []
    for p, g in pairs:
        b = p.bundle
        m = g.masks
        gt_cloud = g.global_points[m].astype(np.float64)
        glob = b.global_points[m].astype(np.float64)
        merged, res = align_local_to_global(_masked_bundle(b), conf_weighting=True, masks=m, with_scale=True)
        if res.errors:
            keep = [i for i in range(b.n_views) if i not in res.errors]
            gt_local_cloud = np.concatenate([g.global_points[i][m[i]] for i in keep])
        else:
            gt_local_cloud = gt_cloud
        a, c = reconstruction_metrics(_sim_to_gt(glob, gt_cloud), gt_cloud)
        acc_g.append(a)
        comp_g.append(c)
        a, c = reconstruction_metrics(_sim_to_gt(merged, gt_local_cloud), gt_cloud)
        acc_l.append(a)
        comp_l.append(c)
        pred_local = b.local_points.astype(np.float64).copy()
        for i in range(b.n_views):
            z = pred_local[i][..., 2][m[i]]
            zs = g.local_points[i][..., 2][m[i]].astype(np.float64)
            ratio = np.median(zs / np.where(np.abs(z) > 1e-12, z, np.nan))
            if np.isfinite(ratio) and ratio > 0:
                pred_local[i] *= ratio
        rel, tau = depth_metrics(pred_local, g.local_points, m)
        rels.append(rel)
        taus.append(tau)
    rep = MetricReport()
    rep.add("acc_global", np.mean(acc_g))
    rep.add("comp_global", np.mean(comp_g))
    rep.add("acc_local_aligned", np.mean(acc_l))
    rep.add("comp_local_aligned", np.mean(comp_l))
    rep.add("delta_acc", rep["acc_global"] - rep["acc_local_aligned"])
    rep.add("delta_comp", rep["comp_global"] - rep["comp_local_aligned"])
    rep.add("depth_rel", np.mean(rels))
    rep.add("depth_tau", np.mean(taus))
    _emit(rep, out_dir, "recon_metrics.txt")
    return rep


def _masked_bundle(b: PredictionBundle) -> PredictionBundle:
    return PredictionBundle(*(np.asarray(a, np.float64) for a in b.arrays()))


def _emit(rep: MetricReport, out_dir, name):
    print(rep.table())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(rep.to_lines())


def cmd_benchmark(checkpoint, view_counts, height=32, width=32, repeats=3, seed=0, out_path=None, jobs=1):
    """Time one forward pass per view count and record its peak allocation.

    Returns rows sorted by view count; a view count that runs out of memory
    is reported with ``status=failed``.
    """
    config, params = load_params(checkpoint)
    rng = np.random.default_rng(seed)
    rows = []
    for n in sorted(set(int(v) for v in view_counts)):
        tokens = n * config.tokens_per_view(height, width)
        row = {"n_views": n, "tokens": tokens, "wall_time_seconds": float("nan"),
               "peak_resident_bytes": 0, "status": "ok"}
        try:
            images = rng.uniform(0, 1, size=(n, height, width, 3))
            assignment = sample_index_assignment(n, config.pool_size, np.random.default_rng([seed, n]))
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                forward(images, assignment, params, config, jobs=jobs)
                times.append(time.perf_counter() - t0)
            tracemalloc.start()
            forward(images, assignment, params, config, jobs=jobs)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            row["wall_time_seconds"] = min(times)
            row["peak_resident_bytes"] = int(peak)
        except MemoryError:
            if tracemalloc.is_tracing():
                tracemalloc.stop()
            row["status"] = "failed"
        rows.append(row)
    text = io.StringIO()
    writer = csv.DictWriter(text, fieldnames=list(rows[0]) if rows else ["n_views"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if out_path is not None:
        Path(out_path).write_text(text.getvalue())
    print(text.getvalue(), end="")
    return rows


def cmd_export_ply(source, out_path, sample=0, head="global", conf_threshold=None):
    """Write one sample's point cloud with image colors.

    ``source`` is a prediction file (``head`` = ``global``, ``local`` or
    ``local-aligned``) or a dataset file (ground-truth global points).
    """
    raw = Path(source).read_bytes()[:8]
    if raw == DATA_MAGIC:
        s = read_dataset(source)[sample]
        pts = s.global_points[s.masks]
        cols = s.images[s.masks]
    else:
        rec = read_predictions(source)[sample]
        b = rec.bundle
        if head == "local-aligned":
            _, res = align_local_to_global(_masked_bundle(b), conf_weighting=True, with_scale=True)
            pts_all = np.zeros(b.local_points.shape)
            keep = np.zeros(b.global_conf.shape, bool)
            for i, tr in enumerate(res.transforms):
                if tr is not None:
                    pts_all[i] = tr.apply(b.local_points[i])
                    keep[i] = True
            conf = b.global_conf
        else:
            pts_all = b.points(head)
            conf = b.conf(head)
            keep = np.ones(conf.shape, bool)
        if conf_threshold is not None:
            keep &= conf >= conf_threshold
        pts = pts_all[keep]
        cols = rec.images[keep]
    if len(pts) == 0:
        raise errors.EmptyCloud("no points survive the confidence threshold")
    write_ply(out_path, pts, cols)
    print(f"wrote {len(pts)} points to {out_path}")
    return len(pts)


# --------------------------------------------------------------------------- argparse


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for per-view work")
    common.add_argument("--deterministic", action="store_true", help="serialize all reductions")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pointfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--resume", help="training checkpoint to resume from")
    t.add_argument("--views-sweep", type=_int_list, help="train once per view count, e.g. 2,4,8")

    i = sub.add_parser("infer", parents=[common], help="predict pointmaps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--views", type=int, help="views per sample (default: all)")
    i.add_argument("--index-mode", choices=("pool", "consecutive"), default="pool")

    e = sub.add_parser("eval-pose", parents=[common], help="camera recovery + RRA/RTA/mAA")
    e.add_argument("--predictions", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--independent-focal", action="store_true", help="estimate a focal per view")

    r = sub.add_parser("eval-recon", parents=[common], help="Acc/Comp and depth metrics")
    r.add_argument("--predictions", required=True)
    r.add_argument("--data", required=True)

    b = sub.add_parser("benchmark", parents=[common], help="forward-pass scaling with view count")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--views", type=_int_list, default=[2, 4, 8, 16, 32])
    b.add_argument("--height", type=int, default=32)
    b.add_argument("--width", type=int, default=32)
    b.add_argument("--repeats", type=int, default=3)

    x = sub.add_parser("export-ply", parents=[common], help="write a colored PLY point cloud")
    x.add_argument("--source", required=True, help="prediction or dataset file")
    x.add_argument("--sample", type=int, default=0)
    x.add_argument("--head", choices=("global", "local", "local-aligned"), default="global")
    x.add_argument("--conf-threshold", type=float)
    return p


def _run(args) -> None:
    cfg = with_seed(load_config(args.config), args.seed)
    seed = cfg.seed if cfg.seed is not None else 0
    jobs = 1 if args.deterministic else max(args.jobs, 1)
    if args.command == "gen-data":
        cmd_gen_data(cfg, args.out or "dataset.f3rdata")
    elif args.command == "train":
        cmd_train(cfg, args.data, args.out or "run", resume=args.resume, views_sweep=args.views_sweep)
    elif args.command == "infer":
        cmd_infer(args.checkpoint, args.data, args.out or "predictions", args.views, seed, args.index_mode, jobs)
    elif args.command == "eval-pose":
        cmd_eval_pose(args.predictions, args.data, cfg, args.out, not args.independent_focal, jobs)
    elif args.command == "eval-recon":
        cmd_eval_recon(args.predictions, args.data, args.out)
    elif args.command == "benchmark":
        cmd_benchmark(args.checkpoint, args.views, args.height, args.width, args.repeats, seed, args.out, jobs)
    elif args.command == "export-ply":
        cmd_export_ply(args.source, args.out or "cloud.ply", args.sample, args.head, args.conf_threshold)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except (errors.DivergedError, errors.NonFiniteActivation, errors.NonFiniteGradient) as e:
        print(f"error: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (errors.FormatError, OSError) as e:
        print(f"error: I/O: {e}", file=sys.stderr)
        return EXIT_IO
    except (errors.PointfuseError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
