import logging

import numpy as np
import pytest

from dynba import ba as ba_mod
from dynba.ba import (BAConfig, BundleAdjuster, huber_cost, huber_weight, initial_estimate, residual,
                      residual_jacobians, run_sliding, schur_solve, solve_window)
from dynba.errors import SolverFailureError, UnderConstrainedFrameError
from dynba.geometry import CameraIntrinsics, Pose, poses_to_arrays, se3_retract
from dynba.synth import SceneConfig, generate

K = CameraIntrinsics(110.0, 110.0, 67.5, 49.5, 136, 100)


@pytest.fixture(scope="module")
def small_scene():
    logging.getLogger("dynba.synth").setLevel(logging.ERROR)
    return generate(SceneConfig(num_frames=8, num_static_points=120, points_per_body=30, track_window=5, seed=3))


def test_huber_weight_examples():
    assert huber_weight(0.0, 2.0) == 1.0
    assert huber_weight(2.0, 2.0) == 1.0
    assert huber_weight(4.0, 2.0) == 0.5


def test_huber_cost_matches_weight():
    # d/ds rho(s) = 2 * w(s) * s for the IRLS weight
    s = np.linspace(0.1, 10, 50)
    h = 1e-6
    d = (huber_cost(s + h, 3.0) - huber_cost(s - h, 3.0)) / (2 * h)
    assert np.allclose(d, 2 * huber_weight(s, 3.0) * s, rtol=1e-6)


def test_config_validation_and_aliases():
    assert BAConfig(mode="f").mode == "decoupled_mask"
    assert BAConfig(mode="a").mode == "total_no_mask"
    for bad in ({"window_frames": 1}, {"gn_iterations": 0}, {"alpha": -1}, {"huber_delta": 0}, {"mode": "x"}):
        with pytest.raises(ValueError):
            BAConfig(**bad)
    with pytest.raises(ValueError):
        BAConfig.from_dict({"bogus": 1})
    assert BAConfig.from_dict(BAConfig().to_dict()) == BAConfig()


def test_residual_zero_on_same_frame():
    T = Pose(np.eye(3), [1.0, 0.0, 0.0])
    r = residual([40.0, 30.0], 2.0, [40.0, 30.0, 2.0], T, T, K)
    assert np.array_equal(r, np.zeros(3))


def test_residual_zero_on_ground_truth(small_scene):
    gt = small_scene
    tr = gt.tracks
    worst = 0.0
    for t in range(tr.sequence_length):
        for s, j in enumerate(tr.step_frames()[t]):
            if not 0 <= j < tr.sequence_length:
                continue
            for n in np.flatnonzero((tr.visibility[t, :, s] > 0) & (gt.owner[t] < 0))[:5]:
                r = residual(tr.query[t, n, :2], tr.query[t, n, 2], tr.total[t, n, s], gt.poses[t], gt.poses[j], K)
                worst = max(worst, np.abs(r).max())
    assert worst < 1e-9


def test_depth_perturbation_on_principal_ray_moves_only_depth():
    Ti = Pose.identity()
    Tj = Pose(np.eye(3), [0.0, 0.0, -0.5])
    x = np.array([K.cx, K.cy])
    r0, _, _, Jy = residual_jacobians(x, 3.0, np.zeros(3), Ti, Tj, K)
    eps = 1e-4
    r1 = residual(x, 3.0 + eps, np.zeros(3), Ti, Tj, K)
    assert np.allclose(r1[:2], r0[:2], atol=1e-12)
    assert abs((r1 - r0)[2] - Jy[2] * eps) < 1e-12


def test_behind_camera_residual_dropped():
    Ti = Pose.identity()
    Tj = Pose(np.eye(3), [0.0, 0.0, 5.0])  # target camera in front of the point
    r, Ji, Jj, Jy = residual_jacobians([K.cx, K.cy], 3.0, np.ones(3), Ti, Tj, K)
    assert not r.any() and not Ji.any() and not Jj.any() and not Jy.any()


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(50):
        Ti = se3_retract(Pose.identity(), rng.normal(size=6) * 0.1)
        Tj = se3_retract(Pose.identity(), rng.normal(size=6) * 0.1)
        x = rng.uniform([10, 10], [120, 90])
        y = rng.uniform(2, 8)
        tgt = rng.normal(size=3)
        beta = rng.uniform(0.5, 2.0)
        _, Ji, Jj, Jy = residual_jacobians(x, y, tgt, Ti, Tj, K, beta)
        for a in range(6):
            d = np.zeros(6)
            d[a] = eps
            fi = (residual(x, y, tgt, se3_retract(Ti, d), Tj, K, beta)
                  - residual(x, y, tgt, se3_retract(Ti, -d), Tj, K, beta)) / (2 * eps)
            fj = (residual(x, y, tgt, Ti, se3_retract(Tj, d), K, beta)
                  - residual(x, y, tgt, Ti, se3_retract(Tj, -d), K, beta)) / (2 * eps)
            assert np.allclose(fi, Ji[:, a], rtol=1e-5, atol=1e-5 * np.abs(Ji).max())
            assert np.allclose(fj, Jj[:, a], rtol=1e-5, atol=1e-5 * np.abs(Jj).max())
        fy = (residual(x, y + eps, tgt, Ti, Tj, K, beta) - residual(x, y - eps, tgt, Ti, Tj, K, beta)) / (2 * eps)
        assert np.allclose(fy, Jy, rtol=1e-5, atol=1e-7)


def _perturbed(gt, scale=0.01, seed=0):
    rng = np.random.default_rng(seed)
    est = initial_estimate(gt.tracks)
    est.poses = [gt.poses[0]] + [se3_retract(p, rng.normal(size=6) * scale) for p in gt.poses[1:]]
    est.depths = est.depths * (1 + rng.normal(size=est.depths.shape) * 0.01)
    return est


def test_normal_equations_match_dense_assembly(small_scene):
    gt = small_scene
    cfg = BAConfig(window_frames=3)
    adj = BundleAdjuster(gt.tracks, K, cfg)
    edges = adj.edges(0, 2)
    est = _perturbed(gt)
    R, t = poses_to_arrays(est.poses)
    A, B, C, g_p, g_y = adj.normal_equations(edges, R, t, est.depths)

    lin = adj.linearize_edges(edges, R, t, est.depths)
    P, M = edges.P, edges.M
    E = len(edges)
    J = np.zeros((E, 3, 6 * P + M))
    for e in range(E):
        if edges.pi[e] >= 0:
            J[e, :, 6 * edges.pi[e]:6 * edges.pi[e] + 6] += lin.J_i[e]
        if edges.pj[e] >= 0:
            J[e, :, 6 * edges.pj[e]:6 * edges.pj[e] + 6] += lin.J_j[e]
        J[e, :, 6 * P + edges.mi[e]] += lin.J_y[e]
    nrm = np.linalg.norm(lin.r, axis=1)
    w = edges.pose_w * huber_weight(nrm, cfg.huber_delta)
    Jf = J.reshape(3 * E, -1)
    W = np.repeat(w, 3)
    H = Jf.T @ (W[:, None] * Jf)
    g = Jf.T @ (W * lin.r.ravel())
    H[6 * P:, 6 * P:] += cfg.alpha * np.eye(M)
    y = est.depths[edges.depth_frames].ravel()
    g[6 * P:] += cfg.alpha * (y - edges.prior[edges.depth_frames].ravel())
    assert np.allclose(A, H[:6 * P, :6 * P], rtol=1e-10, atol=1e-8)
    assert np.allclose(B, H[:6 * P, 6 * P:], rtol=1e-10, atol=1e-8)
    assert np.allclose(np.diag(H[6 * P:, 6 * P:]), C, rtol=1e-10)
    off = H[6 * P:, 6 * P:] - np.diag(np.diag(H[6 * P:, 6 * P:]))
    assert not off.any()  # depth block is diagonal
    assert np.allclose(g_p, g[:6 * P], atol=1e-8)
    assert np.allclose(g_y, g[6 * P:], atol=1e-8)


def test_schur_equals_dense_solve_random():
    rng = np.random.default_rng(4)
    P6, M = 12, 10
    J = rng.normal(size=(40, P6 + M))
    H = J.T @ J + np.eye(P6 + M) * 0.1
    H[P6:, P6:] = np.diag(np.diag(H[P6:, P6:]))
    g = rng.normal(size=P6 + M)
    dp, dy = schur_solve(H[:P6, :P6], H[:P6, P6:], np.diag(H[P6:, P6:]), g[:P6], g[P6:], 1e-3)
    Hd = H.copy()
    Hd[:P6, :P6] += 1e-3 * np.eye(P6)
    ref = np.linalg.solve(Hd, -g)
    assert np.allclose(np.concatenate([dp, dy]), ref, atol=1e-10)


def test_solve_window_gt_is_fixed_point(small_scene):
    gt = small_scene
    est = initial_estimate(gt.tracks)
    est.poses = list(gt.poses)
    out, rep = BundleAdjuster(gt.tracks, K, BAConfig()).solve(est, 0, 4)
    assert rep.costs[0] < 1e-12
    for a, b in zip(out.poses, gt.poses):
        assert np.allclose(a.matrix, b.matrix, atol=1e-12)


def test_solve_window_converges_and_keeps_gauge(small_scene):
    gt = small_scene
    est = _perturbed(gt, scale=0.02)
    anchor = est.poses[0]
    cfg = BAConfig(gn_iterations=10)
    out, rep = BundleAdjuster(gt.tracks, K, cfg).solve(est, 0, 7)
    assert out.poses[0] is anchor
    assert all(b <= a for a, b in zip(rep.costs, rep.costs[1:]))
    assert rep.costs[-1] < 1e-12 * rep.costs[0]
    assert np.all(out.depths > 0)


def test_sliding_single_window_matches_solve_window(small_scene):
    gt = small_scene
    cfg = BAConfig(window_frames=gt.tracks.sequence_length)
    a = run_sliding(gt.tracks, K, cfg)
    b = solve_window(gt.tracks, initial_estimate(gt.tracks), K, cfg, 0, gt.tracks.sequence_length - 1)
    assert all(np.array_equal(p.matrix, q.matrix) for p, q in zip(a.poses, b.poses))
    assert np.array_equal(a.depths, b.depths)


def test_masked_label_matches_deleted_track(small_scene):
    gt = small_scene
    tr = gt.tracks
    n = 3  # a background query
    assert gt.owner[2, n] < 0
    lab = tr.dynamic_label.copy()
    lab[2, n] = 0.5  # fails the pose gate, keeps soft weight 0.5
    vis = tr.visibility.copy()
    vis[2, n] = 0.0
    est = _perturbed(gt)
    # one iteration: the deleted track's depth snaps to its prior, the soft-weighted one does not
    cfg = BAConfig(mode="decoupled_mask", window_frames=5, gn_iterations=1)
    a, _ = BundleAdjuster(tr.with_(dynamic_label=lab), K, cfg).solve(est, 0, 4)
    b, _ = BundleAdjuster(tr.with_(visibility=vis), K, cfg).solve(est, 0, 4)
    for p, q in zip(a.poses, b.poses):
        assert np.allclose(p.matrix, q.matrix, atol=1e-10)
    assert abs(a.depths[2, n] - b.depths[2, n]) > 1e-6


def test_modes_e_and_f_agree_on_binary_labels(small_scene):
    gt = small_scene
    e = run_sliding(gt.tracks, K, BAConfig(mode="e", window_frames=5))
    f = run_sliding(gt.tracks, K, BAConfig(mode="f", window_frames=5))
    assert all(np.array_equal(p.matrix, q.matrix) for p, q in zip(e.poses, f.poses))


def test_threads_do_not_change_results(small_scene):
    gt = small_scene
    a = run_sliding(gt.tracks, K, BAConfig(window_frames=4), workers=1)
    b = run_sliding(gt.tracks, K, BAConfig(window_frames=4), workers=4)
    assert all(np.array_equal(p.matrix, q.matrix) for p, q in zip(a.poses, b.poses))
    assert np.array_equal(a.depths, b.depths)


def test_under_constrained_frame():
    gt = generate(SceneConfig(num_frames=4, num_static_points=2, num_dynamic_bodies=0, track_window=3))
    with pytest.raises(UnderConstrainedFrameError, match="window") as info:
        run_sliding(gt.tracks, K, BAConfig(window_frames=3))
    assert info.value.frame is not None


def test_solver_failure_when_system_singular(small_scene, monkeypatch):
    def broken(*args, **kw):
        raise np.linalg.LinAlgError("singular")
    monkeypatch.setattr(ba_mod, "schur_solve", broken)
    with pytest.raises(SolverFailureError) as info:
        BundleAdjuster(small_scene.tracks, K, BAConfig()).solve(_perturbed(small_scene), 0, 4)
    assert info.value.diagnostics["damping"] > 1e2
