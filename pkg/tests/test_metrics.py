import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from dsal.metrics import ScoreRecord, consistency_scores, dsc, evaluate, rankdata, spearman_rank
from dsal.segnet import PredictionSet, build_model


def dsc_by_sets(a, b):
    """Coordinate-set Dice, written without numpy reductions."""
    sa = {(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j]}
    sb = {(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j]}
    if not sa and not sb:
        return 1.0
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def test_dsc_identical_and_disjoint():
    a = np.zeros((4, 4), np.uint8)
    a[:2] = 1
    assert dsc(a, a) == 1.0
    assert dsc(a, 1 - a) == 0.0


def test_dsc_empty_conventions():
    z = np.zeros((3, 3))
    one = z.copy()
    one[1, 1] = 1
    assert dsc(z, z) == 1.0
    assert dsc(z, one) == 0.0
    assert dsc(one, z) == 0.0


def test_dsc_worked_example():
    a = np.zeros(10, bool)
    b = np.zeros(10, bool)
    a[[0, 1, 2, 3]] = True
    b[[1, 2, 3, 4, 5, 6]] = True
    assert abs(dsc(a, b) - 0.6) <= 1e-12


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dsc_matches_set_counting():
    rng = np.random.default_rng(42)
    for _ in range(100):
        density = rng.uniform(0, 1)
        a = rng.random((32, 32)) < density
        b = rng.random((32, 32)) < rng.uniform(0, 1)
        assert abs(dsc(a, b) - dsc_by_sets(a, b)) <= 1e-12


masks = st.integers(0, 2 ** 32 - 1).map(lambda s: np.random.default_rng(s).random((2, 12, 12)) < 0.4)


@settings(max_examples=60, deadline=None)
@given(masks)
def test_dsc_symmetric_bounded(pair):
    a, b = pair
    v = dsc(a, b)
    assert 0.0 <= v <= 1.0
    assert v == dsc(b, a)


@settings(max_examples=40, deadline=None)
@given(masks)
def test_dsc_invariant_under_shared_permutation(pair):
    a, b = pair
    perm = np.random.default_rng(int(a.sum())).permutation(a.size)
    assert dsc(a, b) == dsc(a.ravel()[perm], b.ravel()[perm])


# -- consistency scores -----------------------------------------------------

def _probs(mask):
    fg = np.where(mask, 0.9, 0.1)
    return np.stack([1 - fg, fg])[None]


def test_consistency_agreeing_heads():
    m = np.zeros((8, 8), bool)
    m[2:5, 2:6] = True
    rec = consistency_scores(PredictionSet(_probs(m), _probs(m), _probs(m)), "s", 2, truth=m)
    assert rec == ScoreRecord("s", 1.0, 1.0, 1.0, 1.0, 2)


def test_consistency_mean_of_heads():
    f = np.zeros(10, bool)
    f[[1, 2, 3, 4, 5, 6]] = True
    low = np.zeros(10, bool)
    low[[0, 1, 2, 3]] = True
    rec = consistency_scores(PredictionSet(_probs(low[None]), _probs(f[None]), _probs(f[None])))
    assert abs(rec.l_dsc - 0.6) <= 1e-12 and rec.m_dsc == 1.0
    assert abs(rec.mean_score - 0.8) <= 1e-12
    assert rec.r_dsc is None


def test_evaluate_rejects_empty(small_cfg):
    with pytest.raises(ValueError):
        evaluate(build_model(small_cfg), np.zeros((0, 1, 32, 32)), np.zeros((0, 32, 32)))


def test_evaluate_in_unit_interval(small_cfg, small_data):
    from dsal.data import stack
    x, y = stack(small_data.test)
    v = evaluate(build_model(small_cfg), x, y)
    assert 0.0 <= v <= 1.0


# -- rank correlation -------------------------------------------------------

def test_spearman_examples():
    assert spearman_rank([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman_rank([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert abs(spearman_rank([1, 2, 3], [2, 1, 3]) - 0.5) <= 1e-12


def test_spearman_constant_input_undefined():
    assert spearman_rank([1, 1, 1], [1, 2, 3]) is None


def test_spearman_needs_three():
    with pytest.raises(ValueError):
        spearman_rank([1, 2], [1, 2])
    with pytest.raises(ValueError):
        spearman_rank([1, 2, 3], [1, 2])


def test_rankdata_ties_average():
    np.testing.assert_array_equal(rankdata([3, 1, 3, 2]), [3.5, 1, 3.5, 2])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.floats(-5, 5, allow_nan=False)), min_size=3, max_size=30))
def test_spearman_matches_scipy(pairs):
    xs, ys = zip(*pairs)
    ours = spearman_rank(xs, ys)
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        assert ours is None
        return
    ref = spearmanr(xs, ys).statistic
    assert abs(ours - ref) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True))
def test_spearman_monotone_transform_invariant(xs):
    ys = [v ** 3 + 2 for v in xs]
    assert abs(spearman_rank(xs, ys) - 1.0) <= 1e-12
