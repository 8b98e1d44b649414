import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynba.errors import DomainError
from dynba.tracks import (TrackTensor, TrackWindow, ba_weight, bilinear_sample, decouple, pose_mask,
                          pose_update_mask, sample_queries)


def small_tensor(L=4, N=3, S=3, seed=0):
    rng = np.random.default_rng(seed)
    total = rng.normal(size=(L, N, S, 3))
    query = total[:, :, S // 2].copy()
    return TrackTensor(query, total, rng.normal(size=(L, N, S, 3)), rng.uniform(size=(L, N, S)),
                       rng.uniform(size=(L, N)))


def test_decouple_examples():
    total = np.array([10.0, 20.0, 3.0])
    dyn = np.array([2.0, -1.0, 0.5])
    assert np.array_equal(decouple(total, dyn, 0.0), total)
    assert np.array_equal(decouple(total, dyn, 1.0), total - dyn)
    assert np.allclose(decouple(total, dyn, 0.5), [9.0, 20.5, 2.75])


def test_decouple_rejects_bad_label():
    with pytest.raises(DomainError):
        decouple(np.zeros(3), np.zeros(3), 1.5)
    with pytest.raises(DomainError):
        decouple(np.zeros(3), np.zeros(3), np.nan)


def test_decouple_broadcasts_labels_over_steps():
    t = small_tensor()
    out = decouple(t.total, t.dynamic, t.dynamic_label)
    ref = t.total - t.dynamic_label[:, :, None, None] * t.dynamic
    assert np.array_equal(out, ref)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(-1e3, 1e3), min_size=9, max_size=9))
def test_decouple_linear_in_label(m, v):
    total, dyn, _ = np.array(v).reshape(3, 3)
    assert np.allclose(decouple(total, dyn, m), total - m * dyn, rtol=0, atol=0)


def test_ba_weight_and_mask():
    assert ba_weight(1.0, 0.0) == 1.0
    assert ba_weight(0.5, 0.5) == 0.25
    assert pose_mask(0.95, 0.05)
    assert not pose_mask(0.95, 0.2)
    assert not pose_mask(0.85, 0.0)
    assert pose_mask(0.9, 0.1)  # thresholds are inclusive


def test_pose_update_mask_on_window():
    w = TrackWindow(0, np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)), np.array([1.0, 0.5, 0.95]), 0.0)
    assert pose_update_mask(w).tolist() == [True, False, True]
    w = TrackWindow(0, np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)), np.ones(3), 1.0)
    assert not pose_update_mask(w).any()


def test_tensor_validation():
    t = small_tensor()
    with pytest.raises(ValueError):
        TrackTensor(t.query, t.total[:, :, :2], t.dynamic[:, :, :2], t.visibility[:, :, :2], t.dynamic_label)
    with pytest.raises(DomainError):
        TrackTensor(t.query, t.total, t.dynamic, t.visibility + 1.0, t.dynamic_label)


def test_tensor_is_read_only():
    t = small_tensor()
    with pytest.raises(ValueError):
        t.total[0, 0, 0, 0] = 1.0


def test_step_frames_and_range():
    t = small_tensor(L=4, S=3)
    assert t.step_frames()[0].tolist() == [-1, 0, 1]
    assert t.in_range()[0].tolist() == [False, True, True]
    assert t.in_range()[3].tolist() == [True, True, False]


def test_decoupled_tensor():
    t = small_tensor()
    d = t.decoupled()
    assert np.array_equal(d.total, t.static())
    assert not d.dynamic.any()
    assert t.window(1, 2).static.shape == (3, 3)


def test_bilinear_sample_centers_and_midpoints():
    img = np.arange(12, dtype=float).reshape(3, 4)
    assert bilinear_sample(img, [2.0, 1.0]) == img[1, 2]
    assert bilinear_sample(img, [0.5, 0.0]) == 0.5
    assert bilinear_sample(img, [3.0, 2.0]) == 11.0
    assert bilinear_sample(img, [10.0, -5.0]) == img[0, 3]


def test_sample_queries_grid_layout():
    depth = np.full((10, 10), 3.0)
    q = sample_queries(depth, 4, mode="grid", jitter=0.0)
    assert np.allclose(q[:, :2], [[2.5, 2.5], [7.5, 2.5], [2.5, 7.5], [7.5, 7.5]])
    assert np.all(q[:, 2] == 3.0)


def test_sample_queries_limits():
    depth = np.ones((2, 2))
    with pytest.raises(ValueError):
        sample_queries(depth, 5)
    q1 = sample_queries(np.ones((20, 20)), 7, mode="random", seed=3)
    q2 = sample_queries(np.ones((20, 20)), 7, mode="random", seed=3)
    assert np.array_equal(q1, q2)
