"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints at the end
of the run, then asserts, so a failing criterion also fails the test.
"""

import functools
import json
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import ACCEPTANCE
from dynba.ba import BAConfig, BundleAdjuster, initial_estimate, residual, residual_jacobians, run_sliding, \
    schur_solve
from dynba.cli import main
from dynba.geometry import CameraIntrinsics, Pose, Sim3Transform, back_project, poses_to_arrays, project, \
    se3_retract, umeyama_sim3
from dynba.metrics import DepthEvalPair, TrajectoryPair, abs_rel, ate, depth_scores, rre, rte
from dynba.pipeline import InitOptions, perturb_poses
from dynba.refine import RefineConfig, RefineProblem, refine, sample_rigid_pairs
from dynba.synth import DepthCorruption, SceneConfig, TrackNoise, corrupt_depth, corrupt_tracks, generate
from dynba.tracks import TrackTensor, decouple

SEEDS = range(5)


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@functools.lru_cache(maxsize=None)
def scene(seed):
    """The reference scene: 60 frames, 400 static and 2 x 50 dynamic points."""
    return generate(SceneConfig(seed=seed))


def test_criterion_1_geometry_roundtrips():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    p = np.stack([rng.uniform(0, 640, 100_000), rng.uniform(0, 480, 100_000), rng.uniform(0.1, 100, 100_000)], -1)
    back = project(back_project(p, K), K)
    rt_err = np.max(np.abs(back - p))
    sim_err = 0.0
    for _ in range(100):
        s = rng.uniform(0.1, 10)
        R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
        t = rng.normal(size=3) * 10
        src = rng.normal(size=(50, 3)) * 3
        est = umeyama_sim3(src, Sim3Transform(s, R, t).apply(src))
        sim_err = max(sim_err, abs(est.scale - s) / s, np.max(np.abs(est.R - R)), np.max(np.abs(est.t - t)))
    dt = time.perf_counter() - t0
    record(1, rt_err < 1e-12 and sim_err < 1e-9 and dt < 5.0,
           f"round-trip max abs err {rt_err:.2e}, Sim3 max err {sim_err:.2e}, {dt:.2f} s")


def _ba_jacobian_error(rng, K):
    eps = 1e-6
    Ti = se3_retract(Pose.identity(), rng.normal(size=6) * 0.1)
    Tj = se3_retract(Pose.identity(), rng.normal(size=6) * 0.1)
    x = rng.uniform([5, 5], [K.width - 5, K.height - 5])
    y = rng.uniform(1, 10)
    tgt = rng.normal(size=3)
    beta = rng.uniform(0.5, 2.0)
    _, Ji, Jj, Jy = residual_jacobians(x, y, tgt, Ti, Tj, K, beta)
    worst = 0.0
    for J, side in ((Ji, 0), (Jj, 1)):
        fd = np.zeros((3, 6))
        for a in range(6):
            d = np.zeros(6)
            d[a] = eps
            args_p = (se3_retract(Ti, d), Tj) if side == 0 else (Ti, se3_retract(Tj, d))
            args_m = (se3_retract(Ti, -d), Tj) if side == 0 else (Ti, se3_retract(Tj, -d))
            fd[:, a] = (residual(x, y, tgt, *args_p, K, beta) - residual(x, y, tgt, *args_m, K, beta)) / (2 * eps)
        worst = max(worst, np.linalg.norm(fd - J) / np.linalg.norm(J))
    fy = (residual(x, y + eps, tgt, Ti, Tj, K, beta) - residual(x, y - eps, tgt, Ti, Tj, K, beta)) / (2 * eps)
    return max(worst, np.linalg.norm(fy - Jy) / np.linalg.norm(Jy))


def _refine_instance(rng):
    L, N, S, H, W = 2, 8, 3, 20, 30
    K = CameraIntrinsics(25.0, 25.0, 14.5, 9.5, W, H)
    vv, uu = np.mgrid[0:H, 0:W]
    ph = rng.uniform(0, 6, size=2)
    depth = np.stack([3.0 + np.sin(0.2 * uu + ph[0] + t) + 0.5 * np.cos(0.3 * vv + ph[1]) for t in range(L)])
    q = np.concatenate([rng.uniform([0, 0], [W - 1, H - 1], (L, N, 2)), np.ones((L, N, 1))], -1)
    total = np.concatenate([rng.uniform([0, 0], [W - 1, H - 1], (L, N, S, 2)), np.ones((L, N, S, 1))], -1)
    total[:, :, 1] = q
    labels = (rng.uniform(size=(L, N)) < 0.25).astype(float)
    tracks = TrackTensor(q, total, np.zeros_like(total), np.ones((L, N, S)), labels, K)
    pairs = sample_rigid_pairs(tracks, 8, int(rng.integers(1 << 31)))
    prob = RefineProblem(depth, tracks, rng.uniform(2, 4, (L, N)), K, (3, 4), pairs, lambda_sigma=1e-2)
    return prob, rng.normal(scale=0.2, size=L * 12), rng.normal(scale=0.1, size=L * N)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _refine_gradient_error(rng):
    prob, u, s = _refine_instance(rng)
    _, gu, gs = prob.depth_terms(u, s)
    _, gr = prob.rigid_terms(u)
    errs = [
        np.linalg.norm(_fd(lambda x: prob.depth_terms(x, s, grad=False)[0], u) - gu) / np.linalg.norm(gu),
        np.linalg.norm(_fd(lambda x: prob.depth_terms(u, x, grad=False)[0], s) - gs) / np.linalg.norm(gs),
    ]
    if np.linalg.norm(gr) > 0:
        errs.append(np.linalg.norm(_fd(lambda x: prob.rigid_terms(x, grad=False)[0], u) - gr) / np.linalg.norm(gr))
    return max(errs)


def test_criterion_2_jacobian_audits():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    K = SceneConfig().intrinsics
    n = 1000
    ba_err = max(_ba_jacobian_error(rng, K) for _ in range(n))
    ref_err = max(_refine_gradient_error(rng) for _ in range(n))
    dt = time.perf_counter() - t0
    record(2, ba_err < 1e-5 and ref_err < 1e-5 and dt < 30.0,
           f"{n} BA + {n} refine configurations, max rel err BA {ba_err:.2e}, refine {ref_err:.2e}, {dt:.1f} s")


def test_criterion_3_schur_equivalence():
    gt = generate(SceneConfig(num_frames=3, num_static_points=10, num_dynamic_bodies=0, track_window=3, seed=5))
    K = gt.intrinsics
    cfg = BAConfig(window_frames=3)
    adj = BundleAdjuster(gt.tracks, K, cfg)
    edges = adj.edges(0, 2)
    rng = np.random.default_rng(3)
    est = initial_estimate(gt.tracks)
    est.poses = [gt.poses[0]] + [se3_retract(p, rng.normal(size=6) * 0.01) for p in gt.poses[1:]]
    est.depths = est.depths * (1 + rng.normal(size=est.depths.shape) * 0.02)
    R, t = poses_to_arrays(est.poses)
    A, B, C, g_p, g_y = adj.normal_equations(edges, R, t, est.depths)
    damping = 1e-4
    dp, dy = schur_solve(A, B, C, g_p, g_y, damping)
    P6 = A.shape[0]
    H = np.block([[A + damping * np.eye(P6), B], [B.T, np.diag(C)]])
    ref = np.linalg.solve(H, -np.concatenate([g_p, g_y]))
    err = np.max(np.abs(np.concatenate([dp, dy]) - ref))
    record(3, err < 1e-8 and edges.P == 2 and C.size == 30,
           f"{edges.P} free poses, {C.size} depths, max elementwise diff {err:.2e}")


def _ba_ate(tracks, gt, mode, init=None):
    est = run_sliding(tracks, gt.intrinsics, BAConfig(mode=mode), init_poses=init)
    return ate(TrajectoryPair(est.poses, gt.poses))


@pytest.mark.slow
def test_criterion_4_oracle_recovery():
    rows, times = [], []
    for seed in SEEDS:
        gt = scene(seed)
        init = perturb_poses(gt.poses, InitOptions("perturbed-gt"), seed)
        t0 = time.perf_counter()
        r = {m: _ba_ate(gt.tracks, gt, m, init) for m in "aef"}
        times.append(time.perf_counter() - t0)
        rows.append(r)
    f_ok = all(r["f"] < 1e-4 for r in rows)
    ratio_ok = all(r["a"] >= 10 * r["f"] for r in rows)
    order = sum(r["a"] > r["e"] >= r["f"] for r in rows)
    detail = "; ".join(f"seed {s}: a={r['a']:.3g} e={r['e']:.2g} f={r['f']:.2g}" for s, r in zip(SEEDS, rows))
    record(4, f_ok and ratio_ok and order >= 4 and max(times) < 120.0,
           f"{detail}; ordering in {order}/5; max {max(times):.0f} s per seed")


@pytest.mark.slow
def test_criterion_5_noise_degradation():
    sigmas = (0.0, 0.25, 0.5, 1.0)
    table = np.zeros((len(SEEDS), len(sigmas)))
    for a, seed in enumerate(SEEDS):
        gt = scene(seed)
        for b, sigma in enumerate(sigmas):
            tracks = corrupt_tracks(gt, TrackNoise(pixel_sigma=sigma), seed)
            table[a, b] = _ba_ate(tracks, gt, "f")
    med = np.median(table, axis=0)
    ok = bool(np.all(np.diff(med) >= 0))
    record(5, ok, "median ATE " + ", ".join(f"sigma={s}: {m:.3g}" for s, m in zip(sigmas, med)))


def _depth_abs_rel(pred, gt):
    return abs_rel(DepthEvalPair(list(pred), list(gt)))


@pytest.mark.slow
def test_criterion_6_refinement_recovery():
    pre, full, depth_only, times = [], [], [], []
    for seed in SEEDS:
        gt = scene(seed)
        bad = corrupt_depth(gt, DepthCorruption(amplitude=0.3), seed).depth_maps
        anchors = gt.tracks.query[..., 2].copy()
        pre.append(_depth_abs_rel(bad, gt.depth_maps))
        t0 = time.perf_counter()
        res = refine(bad, gt.tracks, anchors, RefineConfig(seed=seed), gt.intrinsics)
        times.append(time.perf_counter() - t0)
        full.append(_depth_abs_rel(res.depth_maps, gt.depth_maps))
        res0 = refine(bad, gt.tracks, anchors, RefineConfig(seed=seed, lambda_rigid=0.0), gt.intrinsics)
        depth_only.append(_depth_abs_rel(res0.depth_maps, gt.depth_maps))
    ok = (all(p >= 0.1 for p in pre) and all(f < 0.01 for f in full)
          and np.median(depth_only) >= np.median(full) and max(times) <= 60.0)
    record(6, ok, f"pre {np.round(pre, 3).tolist()}, post {np.round(full, 4).tolist()}, "
                  f"median depth-only {np.median(depth_only):.4f} vs full {np.median(full):.4f}, "
                  f"max {max(times):.0f} s per scene")


def test_criterion_7_metric_self_tests():
    rng = np.random.default_rng(7)
    gt = [Pose.identity()]
    for _ in range(29):
        gt.append(se3_retract(gt[-1], np.concatenate([rng.normal(scale=0.3, size=3), rng.normal(scale=0.05, size=3)])))
    same = TrajectoryPair(gt, gt)
    zero = max(ate(same), rte(same), rre(same))
    est = [se3_retract(p, rng.normal(scale=0.02, size=6)) for p in gt]
    base = ate(TrajectoryPair(est, gt))
    worst_sim = 0.0
    for _ in range(20):
        sim = Sim3Transform(rng.uniform(0.1, 10), Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
                            rng.normal(size=3) * 10)
        worst_sim = max(worst_sim, abs(ate(TrajectoryPair([sim.apply_pose(p) for p in est], gt)) - base))
    depth = [rng.uniform(0.5, 20, size=(30, 40)) for _ in range(4)]
    worst_rel, worst_delta = 0.0, 100.0
    for _ in range(20):
        s, b = rng.uniform(0.01, 100), rng.uniform(-5, 5)
        out = depth_scores(DepthEvalPair([s * d + b for d in depth], depth))
        worst_rel, worst_delta = max(worst_rel, out.abs_rel), min(worst_delta, out.delta)
    ok = zero < 1e-9 and worst_sim < 1e-9 and worst_rel < 1e-9 and worst_delta == 100.0
    record(7, ok, f"identical {zero:.1e}, Sim3 ATE change {worst_sim:.1e}, "
                  f"affine abs_rel {worst_rel:.1e} / delta {worst_delta:g}%")


def _tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json" and p.parent == root:
                doc = json.loads(data)
                doc.pop("timings")
                data = json.dumps(doc, sort_keys=True).encode()
            out[str(p.relative_to(root))] = data
    return out


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scene": {"depth_corruption": {"amplitude": 0.3}},
                               "init": {"source": "perturbed-gt"}, "seed": 11}))
    trees = []
    for name, threads in (("run1", "1"), ("run2", "1"), ("run3", "4")):
        assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / name), "--threads", threads]) == 0
        trees.append(_tree(tmp_path / name))
    diff = sorted(k for k in trees[0] if any(t.get(k) != trees[0][k] for t in trees[1:]))
    same_keys = trees[0].keys() == trees[1].keys() == trees[2].keys()
    record(8, same_keys and not diff,
           f"{len(trees[0])} files compared over 2 runs and --threads 1/4; differing: {diff or 'none'}")


def test_criterion_9_decoupling_algebra():
    rng = np.random.default_rng(9)
    total = rng.normal(size=(1000, 3)) * 100
    dyn = rng.normal(size=(1000, 3)) * 10
    m = rng.uniform(size=(1000, 1))
    exact = np.array_equal(decouple(total, dyn, m), total - m * dyn) \
        and np.array_equal(decouple(total, dyn, 0.0), total) and np.array_equal(decouple(total, dyn, 1.0), total - dyn)
    worst = 0.0
    for seed in SEEDS:
        gt = scene(seed)
        t = gt.tracks
        ok = t.in_range()[:, None, :].repeat(t.queries_per_frame, axis=1)
        worst = max(worst, np.max(np.abs(decouple(t.total, t.dynamic, t.dynamic_label) - gt.static_tracks)[ok]))
    record(9, exact and worst <= 1e-12, f"linearity exact: {exact}; self-consistency max err {worst:.1e} over 5 scenes")
