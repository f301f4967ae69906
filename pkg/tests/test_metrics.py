import math
import warnings

import numpy as np
import pytest
from scipy.spatial import cKDTree

from healswin import autodiff as ad
from healswin import metrics as M


def chamfer_loops(P, Q):
    """Plain double loop, the slowest and most literal form of the definition."""
    def one_way(A, B):
        total = 0.0
        for a in A:
            total += min(float(np.sum((a - b) ** 2)) for b in B)
        return total / len(A)

    return one_way(P, Q) + one_way(Q, P)


def test_chamfer_small_cases_exact():
    assert M.chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 2.0
    P = np.random.default_rng(0).standard_normal((50, 3))
    for method in ("grid", "brute"):
        assert M.chamfer(P, P, method) == 0.0


def test_chamfer_against_double_loop(rng):
    P = rng.standard_normal((40, 3))
    Q = rng.standard_normal((25, 3)) * 2
    ref = chamfer_loops(P, Q)
    assert M.chamfer(P, Q, "brute") == pytest.approx(ref, rel=1e-12)
    assert M.chamfer(P, Q, "grid") == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_grid_matches_brute_and_kdtree(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 3000, 2)
    kind = seed % 3
    if kind == 0:
        P, Q = rng.random((n, 3)), rng.random((m, 3))
    elif kind == 1:
        # clustered and anisotropic clouds
        P = rng.standard_normal((n, 3)) * [10, 0.1, 1]
        Q = np.concatenate([rng.standard_normal((m, 3)) * 0.01, [[50.0, 0, 0]]])
    else:
        # query points far outside the grid box
        P = rng.random((n, 3)) * 100 - 50
        Q = rng.random((m, 3))
    g = M.nn_sqdist_grid(P, Q)
    b = M.nn_sqdist_brute(P, Q)
    d, _ = cKDTree(Q).query(P)
    assert np.allclose(g, b, rtol=1e-12, atol=0)
    assert np.allclose(g, d * d, rtol=1e-9, atol=1e-12)


def test_chamfer_duplicates_and_coplanar():
    P = np.zeros((10, 3))
    Q = np.array([[0.0, 0, 0], [0, 0, 0], [3.0, 4.0, 0]])
    assert M.chamfer(P, Q, "grid") == pytest.approx(0 + 25.0 / 3)
    flat = np.random.default_rng(1).random((100, 3))
    flat[:, 2] = 0.0
    assert M.chamfer(flat, flat[::-1], "grid") == 0.0


def test_chamfer_rejects_bad_clouds():
    with pytest.raises(M.MetricError):
        M.chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(M.MetricError):
        M.chamfer(np.zeros((2, 2)), np.zeros((1, 3)))
    with pytest.raises(M.MetricError):
        M.chamfer(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        M.chamfer(np.zeros((1, 3)), np.zeros((1, 3)), method="octree")


def test_miou_identities():
    gt = np.array([0, 1, 1, 2, 2, 2])
    assert M.spherical_miou(gt, gt, 3)["miou"] == 1.0
    binary = np.array([0, 1, 1, 0, 1])
    assert M.spherical_miou(1 - binary, binary, 2)["miou"] == 0.0


def test_miou_by_hand():
    pred = np.array([0, 0, 1, 1, 2])
    gt = np.array([0, 1, 1, 1, 0])
    res = M.spherical_miou(pred, gt, 3)
    # class 0: tp 1, fp 1, fn 1; class 1: tp 2, fn 1; class 2: fp 1
    assert res["per_class_iou"] == {0: 1 / 3, 1: 2 / 3, 2: 0.0}
    assert res["miou"] == pytest.approx((1 / 3 + 2 / 3 + 0) / 3)


def test_miou_absent_class_warns_and_is_skipped():
    gt = np.array([0, 0, 1])
    with pytest.warns(UserWarning, match="absent"):
        res = M.spherical_miou(gt, gt, 3)
    assert res["per_class_iou"][2] is None and res["miou"] == 1.0


def test_miou_exclude_and_valid():
    pred = np.array([0, 1, 2, 2])
    gt = np.array([0, 1, 1, 2])
    valid = np.array([True, True, False, True])
    assert M.spherical_miou(pred, gt, 3, valid)["miou"] == 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = M.spherical_miou(pred, gt, 3, exclude=(2,))
    assert res["miou"] == pytest.approx((1.0 + 0.5) / 2)


def test_miou_label_range():
    with pytest.raises(M.MetricError):
        M.spherical_miou(np.array([0, 5]), np.array([0, 1]), 3)


def test_flat_miou_uses_coverage():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, 1], [0, 0]])
    cov = np.array([[True, True], [False, False]])
    assert M.flat_miou(pred, gt, cov, 2)["miou"] == 1.0
    with pytest.raises(M.MetricError):
        M.flat_miou(pred, gt, np.zeros((2, 2), dtype=bool), 2)


def test_class_weights():
    w = M.class_weights([16, 0, 81])
    assert w[0] == pytest.approx(0.5) and w[1] == 0.0 and w[2] == pytest.approx(1 / 3)


def test_weighted_cross_entropy_value_and_gradient(f64, rng):
    logits = ad.Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
    labels = rng.integers(0, 3, (2, 5))
    valid = rng.random((2, 5)) > 0.2
    w = np.array([0.5, 1.0, 2.0])
    loss = M.weighted_cross_entropy(logits, labels, w, valid)
    z = logits.data
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    expected = -np.sum(w[labels] * np.take_along_axis(logp, labels[..., None], -1)[..., 0] * valid) / valid.sum()
    assert loss.item() == pytest.approx(expected)
    err = ad.gradcheck(lambda: M.weighted_cross_entropy(logits, labels, w, valid), [logits])
    assert err < 1e-7


def test_cross_entropy_errors(f64):
    logits = ad.Tensor(np.zeros((4, 3)))
    with pytest.raises(M.MetricError):
        M.weighted_cross_entropy(logits, np.array([0, 1, 3, 0]), np.ones(3))
    with pytest.raises(M.MetricError):
        M.weighted_cross_entropy(logits, np.zeros(4), np.ones(3), np.zeros(4, dtype=bool))
    with pytest.raises(ad.ShapeError):
        M.weighted_cross_entropy(logits, np.zeros(5), np.ones(3))


def test_depth_loss_masks_sky_and_invalid(f64, rng):
    stats = M.DepthStats(10.0, 5.0)
    gt = np.array([5.0, 10.0, 0.0, 20.0])
    sky = np.array([False, False, True, False])
    valid = np.array([True, True, True, False])
    pred = ad.Tensor(np.array([-1.0, 1.0, 99.0, 99.0]), requires_grad=True)
    loss = M.depth_l2_loss(pred, gt, sky, stats, valid)
    assert loss.item() == pytest.approx((0.0 + 1.0) / 2)
    loss.backward()
    assert pred.grad[2] == 0 and pred.grad[3] == 0
    with pytest.raises(M.MetricError):
        M.depth_l2_loss(pred, gt, np.ones(4, dtype=bool), stats)


def test_depth_stats():
    s = M.DepthStats.from_depths([np.array([1.0, 3.0, 100.0])], [np.array([True, True, False])])
    assert (s.mean, s.std) == (2.0, 1.0)
    assert s.destandardize(s.standardize(7.5)) == pytest.approx(7.5)
    with pytest.raises(M.MetricError):
        M.DepthStats(0.0, 0.0)


def test_pointcloud_clamps_negative_depth():
    depth = np.array([2.0, -1.0])
    theta = np.array([0.0, math.pi / 2])
    phi = np.array([0.0, 0.0])
    pts, clamped = M.depth_to_pointcloud(depth, theta, phi, return_clamped=True)
    assert clamped == 1
    assert np.allclose(pts, [[0, 0, 2], [0, 0, 0]])


def test_pixel_accuracy():
    assert M.pixel_accuracy([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75
    assert M.pixel_accuracy([0, 1], [1, 1], [False, True]) == 1.0


def test_symmetric_half_swap():
    gt = np.array([0] * 4 + [1] * 4)
    pred = np.array([0, 0, 1, 1, 1, 1, 0, 0])
    res = M.spherical_miou(pred, gt, 2)
    assert res["per_class_iou"] == {0: 1 / 3, 1: 1 / 3}
