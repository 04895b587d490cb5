import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2lmat.errors import DimensionError, ValidationError
from d2lmat.metrics import MetricKind, class_metric, confusion_counts
from d2lmat.oracle import brute_force_thresholds
from d2lmat.thresholding import (
    GridSpec,
    ThresholdVector,
    cap_thresholds,
    fixed_thresholds,
    generate_pseudo_labels,
    mat_search,
    snap_to_grid,
    topk_pseudo_labels,
)

WORKED_SCORES = np.array([[0.9], [0.6], [0.4], [0.1]])
WORKED_LABELS = np.array([[1], [1], [0], [0]])


def test_grid_points():
    g = GridSpec(0.05).points()
    assert g.size == 21 and g[0] == 0.0 and g[-1] == 1.0
    assert g[9] == 0.45
    assert GridSpec(0.01).points().size == 101
    g3 = GridSpec(0.3).points()
    np.testing.assert_allclose(g3, [0, 0.3, 0.6, 0.9, 1.0])
    with pytest.raises(ValidationError):
        GridSpec(0.0)


def test_mat_worked_example():
    tv = mat_search(WORKED_SCORES, WORKED_LABELS, MetricKind.fbeta(0.5), GridSpec(0.05))
    assert tv.tau[0] == 0.45
    assert tv.values[0] == 1.0
    # every grid point in [0.45, 0.60] attains the max; enumerate them by hand
    for tau in (0.45, 0.5, 0.55, 0.6):
        pred = (WORKED_SCORES >= tau).astype(int)
        assert class_metric(confusion_counts(pred, WORKED_LABELS), MetricKind.fbeta(0.5))[0] == 1.0
    pred = (WORKED_SCORES >= 0.4).astype(int)
    assert class_metric(confusion_counts(pred, WORKED_LABELS), MetricKind.fbeta(0.5))[0] < 1.0


def test_mat_oracle_worked_example():
    tv = brute_force_thresholds(WORKED_SCORES, WORKED_LABELS, MetricKind.fbeta(0.5), GridSpec(0.05))
    assert tv.tau[0] == 0.45


def test_mat_separable_reaches_one(rng):
    pos = rng.uniform(0.55, 1.0, 20)
    neg = rng.uniform(0.0, 0.45, 30)
    s = np.concatenate([pos, neg])[:, None]
    y = np.concatenate([np.ones(20), np.zeros(30)]).astype(int)[:, None]
    for kind in (MetricKind.fbeta(0.5), MetricKind.fbeta(2.0)):
        assert mat_search(s, y, kind, GridSpec(0.01)).values[0] == 1.0


def test_mat_degenerate_class():
    s = np.array([[0.2, 0.9], [0.8, 0.1]])
    y = np.array([[0, 1], [0, 0]])
    tv = mat_search(s, y)
    assert tv.tau[0] == 1.0 and tv.degenerate[0]
    assert not tv.degenerate[1]
    pl = generate_pseudo_labels(np.array([[1.0, 1.0]]), tv)
    assert pl[0, 0] == 0


def test_mat_errors():
    with pytest.raises(ValidationError):
        mat_search(np.zeros((0, 2)), np.zeros((0, 2), dtype=int))
    with pytest.raises(DimensionError):
        mat_search(np.zeros((3, 2)), np.zeros((3, 1), dtype=int))


def test_mat_single_instance():
    s = np.array([[0.3]])
    y = np.array([[1]])
    a = mat_search(s, y, MetricKind.fbeta(0.5), GridSpec(0.05))
    b = brute_force_thresholds(s, y, MetricKind.fbeta(0.5), GridSpec(0.05))
    assert a.tau[0] == b.tau[0] == 0.0
    assert a.values[0] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.05, 0.01]),
       st.sampled_from([MetricKind.fbeta(0.5), MetricKind.precision(), MetricKind.recall(),
                        MetricKind.fbeta(2.0)]))
def test_mat_matches_oracle(seed, step, kind):
    rng = np.random.default_rng(seed)
    N, K = int(rng.integers(1, 40)), int(rng.integers(1, 5))
    s = np.round(rng.random((N, K)), int(rng.integers(1, 4)))  # rounding forces ties/grid hits
    y = rng.integers(0, 2, (N, K))
    a = mat_search(s, y, kind, GridSpec(step))
    b = brute_force_thresholds(s, y, kind, GridSpec(step))
    np.testing.assert_array_equal(a.tau, b.tau)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.degenerate, b.degenerate)


def test_mat_parallel_identical(rng):
    s = rng.random((80, 8))
    y = rng.integers(0, 2, (80, 8))
    a = mat_search(s, y, workers=1)
    b = mat_search(s, y, workers=4)
    assert a.tau.tobytes() == b.tau.tobytes()
    assert a.values.tobytes() == b.values.tobytes()


def _midpoint_grid(col):
    u = np.unique(col)
    return np.concatenate([[0.0], (u[:-1] + u[1:]) / 2, [1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([MetricKind.fbeta(0.5), MetricKind.precision(),
                                                    MetricKind.recall()]))
def test_mat_invariant_under_monotone_warp(seed, kind):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 40))
    s = rng.uniform(0.01, 0.99, (N, 1))
    y = rng.integers(0, 2, (N, 1))
    y[0, 0] = 1

    def warp(x):
        return np.expm1(4 * x) / np.expm1(4.0)

    a = mat_search(s, y, kind, _midpoint_grid(s[:, 0]))
    b = mat_search(warp(s), y, kind, warp(_midpoint_grid(s[:, 0])))
    assert a.values[0] == b.values[0]


def test_generate_pseudo_labels_basic():
    pl = generate_pseudo_labels(np.array([[0.7, 0.2], [0.4, 0.9]]), [0.5, 0.5])
    np.testing.assert_array_equal(pl, [[1, 0], [0, 1]])


def test_generate_pseudo_labels_boundaries(rng):
    s = rng.random((10, 2))
    s[3, 1] = 1.0
    pl = generate_pseudo_labels(s, [0.0, 1.0])
    assert pl[:, 0].all()
    np.testing.assert_array_equal(np.flatnonzero(pl[:, 1]), [3])
    eq = generate_pseudo_labels(np.array([[0.35]]), [0.35])
    assert eq[0, 0] == 1
    with pytest.raises(DimensionError):
        generate_pseudo_labels(s, [0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_pseudo_labels_monotone_in_tau(seed, t1, t2):
    rng = np.random.default_rng(seed)
    s = rng.random((30, 1))
    lo, hi = sorted((t1, t2))
    assert generate_pseudo_labels(s, [hi]).sum() <= generate_pseudo_labels(s, [lo]).sum()
    assert np.all(generate_pseudo_labels(s, [hi]) <= generate_pseudo_labels(s, [lo]))


def test_cap_worked_example():
    labels = np.array([[1], [1], [0], [0]])
    scores = np.array([[0.9], [0.8], [0.7], [0.3], [0.2], [0.1]])
    tv = cap_thresholds(scores, labels)
    assert tv.tau[0] == 0.7
    assert generate_pseudo_labels(scores, tv).sum() == 3


def test_cap_extreme_proportions(rng):
    s = rng.random((9, 2))
    y = np.array([[0, 1], [0, 1], [0, 1]])
    tv = cap_thresholds(s, y)
    pl = generate_pseudo_labels(s, tv)
    assert pl[:, 0].sum() == 0 and tv.degenerate[0]
    assert pl[:, 1].sum() == 9


def test_cap_integer_ceiling():
    # 3/10 * 10 is 3.0000000000000004 in floats; the exact count is 3
    y = np.zeros((10, 1), dtype=int)
    y[:3] = 1
    s = np.linspace(0.99, 0.01, 10)[:, None]
    assert generate_pseudo_labels(s, cap_thresholds(s, y)).sum() == 3


def test_cap_errors():
    with pytest.raises(ValidationError):
        cap_thresholds(np.zeros((0, 2)), np.ones((2, 2), dtype=int))


def test_topk():
    np.testing.assert_array_equal(topk_pseudo_labels(np.array([[0.1, 0.9, 0.5]]), 1), [[0, 1, 0]])
    np.testing.assert_array_equal(topk_pseudo_labels(np.array([[0.1, 0.9, 0.5]]), 3), [[1, 1, 1]])
    np.testing.assert_array_equal(topk_pseudo_labels(np.array([[0.5, 0.5, 0.2]]), 1), [[1, 0, 0]])
    with pytest.raises(ValidationError):
        topk_pseudo_labels(np.zeros((1, 3)), 4)
    with pytest.raises(ValidationError):
        topk_pseudo_labels(np.zeros((1, 3)), 0)


def test_fixed():
    np.testing.assert_array_equal(fixed_thresholds(0.5, 3).tau, [0.5, 0.5, 0.5])
    s = np.array([[0.0, 0.3], [1.0, 0.99]])
    assert generate_pseudo_labels(s, fixed_thresholds(0.0, 2)).all()
    np.testing.assert_array_equal(generate_pseudo_labels(s, fixed_thresholds(1.0, 2)), [[0, 0], [1, 0]])
    with pytest.raises(ValidationError):
        fixed_thresholds(1.5, 2)


def test_threshold_vector_validation():
    with pytest.raises(ValidationError):
        ThresholdVector([0.2, 1.2])
    with pytest.raises(DimensionError):
        ThresholdVector([0.2], degenerate=[True, False])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_mat_dominates_other_strategies(seed, tau0):
    rng = np.random.default_rng(seed)
    N, K, M = int(rng.integers(5, 60)), int(rng.integers(1, 5)), int(rng.integers(5, 60))
    s_l = rng.random((N, K))
    y = rng.integers(0, 2, (N, K))
    grid = GridSpec(0.01)
    kind = MetricKind.fbeta(0.5)
    mat = mat_search(s_l, y, kind, grid)
    cap = cap_thresholds(rng.random((M, K)), y)
    for other in (snap_to_grid(cap.tau, grid), snap_to_grid(fixed_thresholds(tau0, K).tau, grid)):
        pred = generate_pseudo_labels(s_l, other)
        achieved = class_metric(confusion_counts(pred, y), kind)
        live = ~mat.degenerate
        assert np.all(mat.values[live] >= achieved[live])
