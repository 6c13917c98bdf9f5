"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` or as a script
(``python3 tests/test_acceptance.py``). The summary lines are also repeated
at the end of a pytest run.
"""

import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

from pointfuse import cli  # noqa: E402
from pointfuse.config import DataConfig, RunConfig  # noqa: E402
from pointfuse.evaluation import (  # noqa: E402
    align_local_to_global, pose_metrics, reconstruction_metrics, weighted_umeyama,
)
from pointfuse.geometry import (  # noqa: E402
    RigidTransform, SimilarityTransform, invert, random_rotation, rotation_angle_deg, translation_angle_deg,
)
from pointfuse.io import ground_truth_predictions, write_predictions  # noqa: E402
from pointfuse.losses import LossConfig, loss_and_gradients, normalized_regression_loss, total_loss  # noqa: E402
from pointfuse.model import (  # noqa: E402
    ModelConfig, PredictionBundle, Tape, backward, consecutive_assignment, forward, init_params,
    load_params, sample_index_assignment, save_params,
)
from pointfuse.pose import parse_pose_file  # noqa: E402
from pointfuse.synthgen import GroundTruthSample, read_dataset, write_dataset  # noqa: E402
from pointfuse.trainer import TrainConfig, fit  # noqa: E402

RESULTS = {}


def record(num, title, ok, detail, seconds=None):
    took = f" ({seconds:.1f}s)" if seconds is not None else ""
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}{took}"
    RESULTS[num] = line
    print(line, flush=True)
    return ok


# --------------------------------------------------------------------------- 1. loss gradients


def _random_loss_case(rng):
    n = int(rng.integers(1, 4))
    shape = (n, 4, 4)
    masks = rng.uniform(size=shape) > 0.25
    masks[:, 0, 0] = True
    masks[:, 3, 3] = True
    gt = GroundTruthSample(np.zeros(shape + (3,)), rng.normal(size=shape + (3,)),
                           rng.normal(size=shape + (3,)), masks)
    b = PredictionBundle(rng.normal(size=shape + (3,)), rng.normal(size=shape),
                         rng.normal(size=shape + (3,)), rng.normal(size=shape))
    return b, gt


def check_loss_gradients():
    rng = np.random.default_rng(101)
    cfg = LossConfig()
    worst = 0.0
    for _ in range(20):
        b, gt = _random_loss_case(rng)
        _, g = loss_and_gradients(b, gt, cfg)
        for field in ("local_points", "local_conf", "global_points", "global_conf"):
            arr, grad = getattr(b, field), getattr(g, field)
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + 1e-5
                up = total_loss(b, gt, cfg).total
                arr[idx] = old - 1e-5
                down = total_loss(b, gt, cfg).total
                arr[idx] = old
                fd[idx] = (up - down) / 2e-5
            worst = max(worst, np.abs(fd - grad).max() / max(np.abs(fd).max(), 1e-12))
    scale_dev = 0.0
    for _ in range(5):
        pred, target = rng.normal(size=(2, 6, 6, 3))
        mask = rng.uniform(size=(6, 6)) > 0.2
        base = normalized_regression_loss(pred, target, mask)
        for c in (0.1, 1.0, 7.3):
            scale_dev = max(scale_dev, np.abs(normalized_regression_loss(c * pred, target, mask) - base).max(),
                            np.abs(normalized_regression_loss(pred, c * target, mask) - base).max())
    return worst < 1e-6 and scale_dev < 1e-9, f"max relative FD error {worst:.2e} (< 1e-6), scale deviation {scale_dev:.1e} (< 1e-9)"


# --------------------------------------------------------------------------- 2. model gradients


def check_model_gradients():
    cfg = ModelConfig(patch_size=4, embed_dim=16, fusion_layers=1, attention_heads=2, head_hidden_dim=16,
                      pool_size=8, max_train_views=2, precision="double")
    params = init_params(cfg, 0)
    rng = np.random.default_rng(202)
    # perturbed weights so the zero-initialized residual branches carry gradient too
    for k in params.params:
        params.params[k] = params.params[k] + rng.normal(scale=0.3, size=params[k].shape)
    images = rng.uniform(size=(2, 8, 8, 3))
    masks = rng.uniform(size=(2, 8, 8)) > 0.2
    gt = GroundTruthSample(images, rng.normal(size=(2, 8, 8, 3)), rng.normal(size=(2, 8, 8, 3)), masks)
    assignment = [1, 5]

    def objective():
        return total_loss(forward(images, assignment, params, cfg), gt).total

    tape = Tape()
    bundle = forward(images, assignment, params, cfg, tape=tape)
    _, bgrad = loss_and_gradients(bundle, gt)
    grads = backward(bgrad, tape, params, cfg)
    worst, worst_name = 0.0, ""
    for name, w in params.items():
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + 1e-5
            params.touch()
            up = objective()
            w[idx] = old - 1e-5
            params.touch()
            down = objective()
            w[idx] = old
            params.touch()
            fd[idx] = (up - down) / 2e-5
        rel = np.abs(fd - grads[name]).max() / max(np.abs(fd).max(), 1e-12)
        if rel > worst:
            worst, worst_name = rel, name
    n_params = sum(p.size for p in params.params.values())
    return worst < 1e-4, f"{n_params} parameters, worst tensor {worst_name} relative error {worst:.2e} (< 1e-4)"


# --------------------------------------------------------------------------- 3. permutation equivariance


def check_permutation():
    cfg = ModelConfig(embed_dim=64, fusion_layers=4, attention_heads=4, head_hidden_dim=64, pool_size=32)
    rng = np.random.default_rng(303)
    params = init_params(cfg, 3)
    for k in params.params:
        params.params[k] = (params.params[k] + rng.normal(scale=0.05, size=params[k].shape)).astype(np.float32)
    images = rng.uniform(size=(4, 32, 32, 3))
    assignment = sample_index_assignment(4, 32, rng)
    worst = 0.0
    for perm in ([0, 2, 3, 1], [0, 3, 1, 2], [0, 1, 3, 2]):
        a = forward(images, assignment, params, cfg)
        b = forward(images[perm], [assignment[i] for i in perm], params, cfg)
        worst = max(worst, max(float(np.abs(x[perm] - y).max()) for x, y in zip(a.arrays(), b.arrays())))
    return worst < 1e-5, f"max |delta| {worst:.2e} over 3 permutations (< 1e-5)"


# --------------------------------------------------------------------------- 4. oracle pose pipeline


def check_oracle_pose(tmp):
    cfg = RunConfig(data=DataConfig(n_scenes=50, n_views=8, seed=4))
    data = tmp / "oracle.f3rdata"
    samples = cli.cmd_gen_data(cfg, data)
    write_predictions(ground_truth_predictions(samples), tmp / "oracle.f3rpred")
    rep = cli.cmd_eval_pose(tmp / "oracle.f3rpred", data, cfg, out_dir=tmp / "oracle_eval")
    blocks = (tmp / "oracle_eval" / "poses.txt").read_text().split("# sample=")[1:]
    good = total = 0
    for block, s in zip(blocks, samples):
        est = parse_pose_file(block.split("\n", 1)[1])
        for i, cam in enumerate(s.cameras):
            total += 1
            if i not in est:
                continue
            e = est[i]
            rot = rotation_angle_deg(e.pose.rotation, cam.pose.rotation)
            if np.linalg.norm(cam.pose.translation) > 1e-9:
                trans = translation_angle_deg(e.pose.translation, cam.pose.translation)
            else:
                # view 0 sits at the origin: use the angle its offset subtends at the scene center
                dist = np.linalg.norm(s.global_points[i][s.masks[i]].mean(axis=0))
                trans = np.degrees(np.arctan2(np.linalg.norm(e.pose.translation), dist))
            focal_err = abs(e.intrinsics.focal / cam.intrinsics.focal - 1.0)
            good += rot < 0.5 and trans < 0.5 and focal_err < 0.02
    frac = good / total
    ok = frac >= 0.95 and rep["rra@15"] == 1.0 and rep["rta@15"] == 1.0
    return ok, (f"{good}/{total} views within 0.5 deg / 0.5 deg / 2% focal ({100 * frac:.1f}%, need >= 95%), "
                f"RRA@15={rep['rra@15']} RTA@15={rep['rta@15']}")


# --------------------------------------------------------------------------- 5. metric oracles


def check_metric_oracles():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 11))
        gt = [RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(n)]
        pred = [RigidTransform(random_rotation(rng) if rng.uniform() < 0.3 else p.rotation,
                               p.translation + rng.normal(scale=0.3, size=3)) for p in gt]
        mine, ref = pose_metrics(pred, gt), oracles.pose_metrics(pred, gt)
        for a, b in zip(mine[:2], ref[:2]):
            worst = max(worst, max(abs(a[k] - b[k]) for k in a))
        worst = max(worst, abs(mine[2] - ref[2]))
        p = rng.normal(size=(int(rng.integers(1, 1001)), 3))
        g = rng.normal(size=(int(rng.integers(1, 1001)), 3))
        worst = max(worst, *np.abs(np.subtract(reconstruction_metrics(p, g), oracles.reconstruction_metrics(p, g))))
    return worst <= 1e-12, f"max deviation from brute force {worst:.1e} over 20 pose + 20 cloud instances (<= 1e-12)"


# --------------------------------------------------------------------------- 6. alignment


def check_alignment():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        truth = SimilarityTransform(float(rng.uniform(0.2, 5.0)), random_rotation(rng), rng.normal(scale=3, size=3))
        src = rng.normal(size=(int(rng.integers(4, 200)), 3))
        w = rng.uniform(0.1, 2.0, size=len(src))
        est = weighted_umeyama(src, truth.apply(src), w)
        worst = max(worst, np.linalg.norm(est.rotation - truth.rotation),
                    np.linalg.norm(est.translation - truth.translation), abs(est.scale - truth.scale))
    rms = 0.0
    for _ in range(10):
        glob = rng.normal(size=(4, 8, 8, 3))
        local = np.stack([invert(RigidTransform(random_rotation(rng), rng.normal(size=3))).apply(g) for g in glob])
        conf = rng.normal(size=(4, 8, 8))
        _, res = align_local_to_global(PredictionBundle(local, conf, glob, conf.copy()))
        rms = max(rms, max(res.residual_rms))
    ok = worst < 1e-9 and rms < 1e-9
    return ok, f"umeyama worst error {worst:.1e} over 100 transforms, local-to-global residual RMS {rms:.1e} (< 1e-9)"


# --------------------------------------------------------------------------- 7/8. overfit + train short, test long

OVERFIT_MODEL = ModelConfig(embed_dim=64, fusion_layers=4, attention_heads=4, head_hidden_dim=64,
                            pool_size=32, max_train_views=4)
# four scenes, each rendered from a 12-camera ring; training sees 4 of the 12 views per step
OVERFIT_DATA = DataConfig(n_scenes=4, n_views=12, height=32, width=32, seed=0)
OVERFIT_TRAIN = TrainConfig(base_lr=1e-3, total_steps=2000, batch_size=4, views_per_sample=4, pool_size=32,
                            seed=0, view_selection="random")
FOUR_VIEWS = [0, 3, 6, 9]


class Overfit:
    """Trains the pool-index model and the consecutive-index ablation once per session."""

    def __init__(self, tmp):
        self.tmp = tmp
        self.data_path = tmp / "overfit.f3rdata"
        self.samples = cli.cmd_gen_data(RunConfig(data=OVERFIT_DATA), self.data_path)
        self.runs = {}

    def run(self, mode):
        if mode not in self.runs:
            t0 = time.time()
            params, rows = fit(self.samples, replace(OVERFIT_TRAIN, index_sampling=mode), OVERFIT_MODEL)
            path = self.tmp / f"overfit_{mode}.f3rckpt"
            save_params(params, path, OVERFIT_MODEL)
            self.runs[mode] = (path, rows, time.time() - t0)
        return self.runs[mode]

    def regression(self, mode, views, draws=3):
        path, _, _ = self.run(mode)
        config, params = load_params(path)
        rng = np.random.default_rng(808)
        losses = []
        for s in self.samples:
            sub = s.subset(views)
            for _ in range(draws):
                if mode == "consecutive":
                    assignment = consecutive_assignment(len(views))
                else:
                    assignment = sample_index_assignment(len(views), config.pool_size, rng)
                bundle = forward(sub.images, assignment, params, config)
                if not all(np.all(np.isfinite(a)) for a in bundle.arrays()):
                    return float("inf")
                losses.append(total_loss(bundle, sub, LossConfig()).regression)
        return float(np.mean(losses))


def check_overfit(fx: Overfit):
    path, rows, seconds = fx.run("pool")
    ratio = rows[-1]["loss_total"] / rows[0]["loss_total"]
    four = fx.tmp / "overfit_4views.f3rdata"
    write_dataset([s.subset(FOUR_VIEWS) for s in fx.samples], four)
    cli.cmd_infer(path, four, fx.tmp / "overfit_pred", seed=0)
    rep = cli.cmd_eval_pose(fx.tmp / "overfit_pred" / "predictions.f3rpred", four, RunConfig(),
                            out_dir=fx.tmp / "overfit_eval")
    rra = rep["rra@15"]
    ok = ratio < 0.1 and rra == 1.0
    return ok, (f"loss {rows[0]['loss_total']:.3f} -> {rows[-1]['loss_total']:.3f} (ratio {ratio:.3f}, < 0.1), "
                f"RRA@15 from predicted global pointmaps {rra:.3f} (need 1.0), training {seconds / 60:.1f} min")


def check_short_long(fx: Overfit):
    every = list(range(OVERFIT_DATA.n_views))
    pool4, pool12 = fx.regression("pool", FOUR_VIEWS), fx.regression("pool", every)
    cons4, cons12 = fx.regression("consecutive", FOUR_VIEWS), fx.regression("consecutive", every)
    pool_ratio, cons_ratio = pool12 / pool4, cons12 / cons4
    ok = np.isfinite(pool12) and pool_ratio <= 2.0 and cons_ratio > 2.0
    return ok, (f"pool-index model N=12/N=4 regression loss {pool12:.4f}/{pool4:.4f} = {pool_ratio:.2f} (<= 2); "
                f"consecutive-index ablation {cons12:.4f}/{cons4:.4f} = {cons_ratio:.2f} (need > 2)")


# --------------------------------------------------------------------------- 9. determinism

DETERMINISM_CONFIG = {
    "data": {"n_scenes": 2, "n_views": 3, "height": 16, "width": 16},
    "model": {"embed_dim": 16, "fusion_layers": 1, "attention_heads": 2, "head_hidden_dim": 16,
              "pool_size": 8, "max_train_views": 3},
    "train": {"total_steps": 5, "views_per_sample": 3, "pool_size": 8, "base_lr": 1e-3},
}


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_determinism(tmp):
    cfg = tmp / "det.json"
    cfg.write_text(json.dumps(DETERMINISM_CONFIG))
    digests = []
    for run in ("a", "b"):
        d = tmp / f"det_{run}"
        codes = [
            cli.main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(d / "data.f3rdata")]),
            cli.main(["train", "--config", str(cfg), "--seed", "7", "--deterministic",
                      "--data", str(d / "data.f3rdata"), "--out", str(d / "run")]),
            cli.main(["infer", "--config", str(cfg), "--seed", "7", "--deterministic",
                      "--checkpoint", str(d / "run" / "step_5.f3rckpt"), "--data", str(d / "data.f3rdata"),
                      "--out", str(d / "pred")]),
        ]
        if any(codes):
            return False, f"run {run} exit codes {codes}"
        digests.append([_sha(d / "data.f3rdata"), _sha(d / "run" / "step_5.f3rckpt"),
                        _sha(d / "run" / "train.log"), _sha(d / "pred" / "predictions.f3rpred")])
    same = [x == y for x, y in zip(*digests)]
    return all(same), f"dataset/checkpoint/log/predictions identical across runs: {same}"


# --------------------------------------------------------------------------- 10. benchmark


def check_benchmark(tmp):
    ckpt = tmp / "bench.f3rckpt"
    save_params(init_params(OVERFIT_MODEL, 0), ckpt, OVERFIT_MODEL)
    out = tmp / "bench.csv"
    cli.cmd_benchmark(ckpt, [2, 4, 8, 16, 32], repeats=3, out_path=out)
    rows = list(csv.DictReader(out.open()))
    views = [int(r["n_views"]) for r in rows]
    times = [float(r["wall_time_seconds"]) for r in rows]
    tokens_ok = all(int(r["tokens"]) == int(r["n_views"]) * 32 * 32 // 4**2 for r in rows)
    status_ok = all(r["status"] == "ok" for r in rows)
    monotone = all(b >= a for a, b in zip(times, times[1:]))
    ok = views == [2, 4, 8, 16, 32] and tokens_ok and status_ok and monotone
    return ok, (f"wall times {', '.join(f'{t * 1000:.1f}' for t in times)} ms "
                f"(non-decreasing: {monotone}), tokens = N*HW/P^2: {tokens_ok}, all ok: {status_ok}")


# --------------------------------------------------------------------------- pytest wiring


def _timed(num, title, fn, *args):
    t0 = time.time()
    ok, detail = fn(*args)
    record(num, title, ok, detail, time.time() - t0)
    return ok, detail


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    return Overfit(tmp_path_factory.mktemp("overfit"))


def test_criterion_01_loss_gradients():
    ok, detail = _timed(1, "loss gradients", check_loss_gradients)
    assert ok, detail


def test_criterion_02_model_gradients():
    ok, detail = _timed(2, "model gradient check", check_model_gradients)
    assert ok, detail


def test_criterion_03_permutation_equivariance():
    ok, detail = _timed(3, "permutation equivariance", check_permutation)
    assert ok, detail


def test_criterion_04_oracle_pose_pipeline(tmp_path):
    ok, detail = _timed(4, "oracle pose pipeline", check_oracle_pose, tmp_path)
    assert ok, detail


def test_criterion_05_metric_oracles():
    ok, detail = _timed(5, "metric oracles", check_metric_oracles)
    assert ok, detail


def test_criterion_06_alignment():
    ok, detail = _timed(6, "alignment", check_alignment)
    assert ok, detail


def test_criterion_07_overfit_training(overfit):
    ok, detail = _timed(7, "overfit training", check_overfit, overfit)
    assert ok, detail


def test_criterion_08_train_short_test_long(overfit):
    ok, detail = _timed(8, "train short, test long", check_short_long, overfit)
    assert ok, detail


def test_criterion_09_determinism(tmp_path):
    ok, detail = _timed(9, "determinism", check_determinism, tmp_path)
    assert ok, detail


def test_criterion_10_benchmark(tmp_path):
    ok, detail = _timed(10, "benchmark sanity", check_benchmark, tmp_path)
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        root = Path(d)
        checks = [
            (1, "loss gradients", check_loss_gradients, ()),
            (2, "model gradient check", check_model_gradients, ()),
            (3, "permutation equivariance", check_permutation, ()),
            (4, "oracle pose pipeline", check_oracle_pose, (root,)),
            (5, "metric oracles", check_metric_oracles, ()),
            (6, "alignment", check_alignment, ()),
        ]
        fx = Overfit(root)
        checks += [
            (7, "overfit training", check_overfit, (fx,)),
            (8, "train short, test long", check_short_long, (fx,)),
            (9, "determinism", check_determinism, (root,)),
            (10, "benchmark sanity", check_benchmark, (root,)),
        ]
        for num, title, fn, args in checks:
            _timed(num, title, fn, *args)
        print("\n".join(RESULTS[k] for k in sorted(RESULTS)))
        sys.exit(0 if all("PASS" in line for line in RESULTS.values()) else 1)
