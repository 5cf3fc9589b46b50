import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lesionground.errors import ShapeError, UndefinedMetricError
from lesionground.metrics import (
    MatchResult,
    aggregate,
    assign,
    boundary,
    dice,
    evaluate_case,
    hausdorff,
    hd95,
    lesion_recall,
    lls,
    match_lesions,
)
from lesionground.selftest import brute_boundary, brute_force_assignment, brute_hd95

masks = arrays(bool, (5, 5, 4))
nonempty = masks.filter(lambda m: m.any())


def box(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


def test_dice_examples():
    a = box((4, 4, 4), (0, 0, 0), (2, 2, 1))
    b = box((4, 4, 4), (1, 0, 0), (3, 2, 1))
    assert dice(a, a) == 1.0
    assert dice(a, box((4, 4, 4), (3, 3, 3), (4, 4, 4))) == 0.0
    assert dice(a, b) == 0.5
    assert dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(ShapeError):
        dice(a, np.zeros((2, 2, 2)))


def test_hd95_examples():
    a = box((8, 8, 8), (1, 1, 1), (5, 5, 5))
    assert hd95(a, a) == 0.0
    p = np.zeros((12, 3, 3), bool)
    q = p.copy()
    p[0, 1, 1] = q[10, 1, 1] = True
    assert hd95(p, q) == pytest.approx(10.0)
    assert hd95(p, q, spacing=(2.0, 1.0, 1.0)) == pytest.approx(20.0)
    with pytest.raises(UndefinedMetricError):
        hd95(a, np.zeros_like(a))


def test_boundary_matches_neighbour_scan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random((6, 5, 4)) < 0.5
        assert np.array_equal(boundary(m), brute_boundary(m))


@settings(max_examples=40, deadline=None)
@given(nonempty, nonempty)
def test_hd95_matches_all_pairs_oracle_and_properties(a, b):
    h = hd95(a, b)
    assert h == pytest.approx(brute_hd95(a, b), abs=1e-9)
    assert h == pytest.approx(hd95(b, a), abs=1e-12)
    assert h <= hausdorff(a, b) + 1e-12
    assert hd95(a, b, spacing=(3.0, 3.0, 3.0)) == pytest.approx(3 * h, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a) and 0.0 <= d <= 1.0
    if a.any():
        assert dice(a, a) == 1.0


def test_single_match_and_threshold():
    gt = box((10, 10, 10), (2, 2, 2), (6, 6, 6))
    m = match_lesions(gt, box((10, 10, 10), (3, 2, 2), (7, 6, 6)))
    assert m.n_matched == 1 and m.pairs[0][2] == pytest.approx(0.75)
    tiny = box((10, 10, 10), (5, 5, 5), (6, 6, 6)) | box((10, 10, 10), (6, 6, 6), (9, 9, 9))
    none = match_lesions(gt, tiny)
    assert dice(gt, tiny) < 0.1 and none.n_matched == 0 and none.unmatched_gt == [0]


@pytest.mark.parametrize("seed", range(20))
def test_assignment_matches_permutation_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, k = rng.integers(1, 7, size=2)
    d = rng.random((n, k)) * (rng.random((n, k)) < 0.7)
    pairs = assign(d)
    assert len({j for _, j in pairs}) == len(pairs)
    assert all(d[i, j] >= 0.1 for i, j in pairs)
    assert sum(d[i, j] for i, j in pairs) == pytest.approx(brute_force_assignment(d), abs=1e-12)


def result(pairs, n_gt):
    return MatchResult(pairs=pairs, n_gt=n_gt)


def test_recall_and_lls_examples():
    assert lesion_recall(result([(0, 0, 1.0, 0.0)], 1)) == 1.0
    assert lesion_recall(result([], 3)) == 0.0
    assert lesion_recall(result([(0, 0, 0.5, 0), (1, 1, 0.5, 0)], 3)) == pytest.approx(0.6667, abs=1e-4)
    assert lls(result([(0, 0, 1.0, 0.0)], 1)) == 1.0
    assert lls(result([(0, 0, 0.5, 20.0)], 1), 20.0) == pytest.approx(0.5 * math.exp(-1), abs=1e-12)
    assert lls(result([], 2)) == 0.0
    with pytest.raises(UndefinedMetricError):
        lesion_recall(result([], 0))
    with pytest.raises(UndefinedMetricError):
        lls(result([], 0))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 1.0), st.floats(0, 100)), max_size=5), st.integers(0, 4), st.floats(0.01, 50))
def test_lls_bounded_by_recall_and_monotone_in_distance(pairs, extra, bump):
    m = result([(i, i, d, c) for i, (d, c) in enumerate(pairs)], len(pairs) + extra)
    if m.n_gt == 0:
        return
    score = lls(m)
    assert 0.0 <= score <= lesion_recall(m) + 1e-12
    if pairs:
        moved = list(m.pairs)
        i, j, d, c = moved[0]
        moved[0] = (i, j, d, c + bump)
        assert lls(result(moved, m.n_gt)) < score


def test_match_is_injective_and_counts_consistent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        gt = rng.random((8, 8, 8)) < 0.15
        pred = rng.random((8, 8, 8)) < 0.15
        m = match_lesions(gt, pred, connectivity=6)
        assert len({p[1] for p in m.pairs}) == m.n_matched <= min(m.n_gt, m.n_pred)
        assert m.n_matched + len(m.unmatched_gt) == m.n_gt
        assert m.n_matched + len(m.unmatched_pred) == m.n_pred


def test_centroid_distance_uses_spacing():
    gt = box((10, 4, 4), (2, 0, 0), (6, 4, 4))
    pred = box((10, 4, 4), (3, 0, 0), (7, 4, 4))
    m = match_lesions(gt, pred, spacing=(2.0, 1.0, 1.0))
    assert m.pairs[0][3] == pytest.approx(2.0)


def test_evaluate_case_record_and_json():
    gt = box((10, 10, 10), (2, 2, 2), (6, 6, 6))
    rec = evaluate_case(gt, gt)
    assert rec["dice"] == 1.0 and rec["hd95"] == 0.0 and rec["lr"] == 1.0 and rec["lls"] == 1.0
    json.dumps(rec)
    empty = evaluate_case(np.zeros_like(gt), gt)
    assert empty["hd95_penalized"] and empty["hd95"] == pytest.approx(math.sqrt(300))
    assert empty["lr"] == 0.0
    agg = aggregate([rec, empty])
    assert agg["dice"]["mean"] == 0.5 and agg["dice"]["n"] == 2
