import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsal.active import (
    ALState,
    AnnotationError,
    Learner,
    QueryPolicy,
    TrainConfig,
    init_state,
    oracle_annotate,
    run_experiment,
    run_policy,
    run_round,
    score_pool,
    select,
)
from dsal.metrics import ScoreRecord
from dsal.segnet import TrainingDivergedError, build_model

FAST = TrainConfig(epochs_per_round=1, batch_size=8)


def rec(sid, score):
    return ScoreRecord(sid, score, score, score)


# -- init_state -------------------------------------------------------------

def test_init_state_sizes():
    ids = [f"train_{i:03d}" for i in range(139)]
    st_ = init_state(ids, 10, seed=0)
    assert len(st_.labeled) == 10 and len(st_.unlabeled) == 129 and st_.round == 0
    assert sorted(st_.labeled + st_.unlabeled) == ids


def test_init_state_full_pool():
    st_ = init_state(["a", "b", "c"], 3, seed=1)
    assert st_.unlabeled == [] and sorted(st_.labeled) == ["a", "b", "c"]


def test_init_state_seeded():
    ids = [str(i) for i in range(50)]
    assert init_state(ids, 10, 7).labeled == init_state(ids, 10, 7).labeled
    assert init_state(ids, 10, 7).labeled != init_state(ids, 10, 8).labeled


def test_init_state_too_many():
    with pytest.raises(ValueError):
        init_state(["a", "b"], 3, 0)


# -- select -----------------------------------------------------------------

def test_select_high_top_two():
    scores = [rec("a", 0.9), rec("b", 0.5), rec("c", 0.7)]
    assert set(select(scores, QueryPolicy("consistency_high", 2))) == {"a", "c"}


def test_select_low():
    scores = [rec("a", 0.9), rec("b", 0.5), rec("c", 0.7)]
    assert select(scores, QueryPolicy("consistency_low", 1)) == ["b"]


def test_select_whole_pool_when_k_large():
    scores = [rec("a", 0.9), rec("b", 0.5)]
    assert set(select(scores, QueryPolicy("consistency_high", 5))) == {"a", "b"}
    assert set(select(scores, QueryPolicy("random", 5), np.random.default_rng(0))) == {"a", "b"}


def test_select_tie_break_by_id():
    assert select([rec("b", 0.7), rec("a", 0.7)], QueryPolicy("consistency_high", 1)) == ["a"]
    assert select([rec("b", 0.7), rec("a", 0.7)], QueryPolicy("consistency_low", 1)) == ["a"]


def test_select_random_seeded_and_needs_rng():
    scores = [rec(f"s{i:02d}", 0.5) for i in range(30)]
    a = select(scores, QueryPolicy("random", 5), np.random.default_rng(3))
    b = select(list(reversed(scores)), QueryPolicy("random", 5), np.random.default_rng(3))
    assert a == b and len(set(a)) == 5
    with pytest.raises(ValueError):
        select(scores, QueryPolicy("random", 5))


def test_policy_validation():
    with pytest.raises(ValueError):
        QueryPolicy("entropy")
    with pytest.raises(ValueError):
        QueryPolicy("random", 0)


score_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=25)


@settings(max_examples=80, deadline=None)
@given(score_lists, st.integers(1, 10))
def test_select_high_separates(values, k):
    scores = [rec(f"s{i:02d}", v) for i, v in enumerate(values)]
    chosen = set(select(scores, QueryPolicy("consistency_high", k)))
    assert len(chosen) == min(k, len(values))
    rest = [r.mean_score for r in scores if r.sample_id not in chosen]
    if rest:
        assert min(r.mean_score for r in scores if r.sample_id in chosen) >= max(rest)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 64), min_size=1, max_size=25), st.integers(1, 10))
def test_select_invariant_under_increasing_transform(values, k):
    # dyadic scores keep the cube exact, so the transform is strictly increasing
    scores = [rec(f"s{i:02d}", v / 64) for i, v in enumerate(values)]
    warped = [rec(r.sample_id, r.mean_score ** 3) for r in scores]
    pol = QueryPolicy("consistency_high", k)
    assert select(scores, pol) == select(warped, pol)


# -- oracle_annotate --------------------------------------------------------

def _store(small_data):
    return {s.id: s for s in small_data.train}


def test_annotate_moves_ids(small_data):
    store = _store(small_data)
    state = init_state(store, 4, 0)
    ids = state.unlabeled[:10]
    out = oracle_annotate(state, ids, store)
    assert len(state.labeled) == 14 and len(out) == 10
    assert all(s.labeled and s.mask is not None for s in out)
    state.check()


def test_annotate_empty_is_noop(small_data):
    store = _store(small_data)
    state = init_state(store, 4, 0)
    before = (list(state.labeled), list(state.unlabeled))
    assert oracle_annotate(state, [], store) == []
    assert (state.labeled, state.unlabeled) == before


@pytest.mark.parametrize("case", ["labeled", "unknown", "no_mask", "duplicate"])
def test_annotate_rejections_leave_state(small_data, case):
    store = dict(_store(small_data))
    state = init_state(store, 4, 0)
    good = state.unlabeled[0]
    bad = {"labeled": state.labeled[0], "unknown": "nope", "duplicate": good}
    if case == "no_mask":
        victim = state.unlabeled[1]
        store[victim] = dataclasses.replace(store[victim], mask=None)
        bad[case] = victim
    before = (list(state.labeled), list(state.unlabeled))
    with pytest.raises(AnnotationError):
        oracle_annotate(state, [good, bad[case]], store)
    assert (state.labeled, state.unlabeled) == before


# -- score_pool -------------------------------------------------------------

def test_score_pool_records(small_cfg, small_data):
    model = build_model(small_cfg)
    samples = list(reversed(small_data.train[:7]))
    recs = score_pool(model, samples, round=3)
    assert [r.sample_id for r in recs] == sorted(s.id for s in samples)
    assert all(0 <= r.mean_score <= 1 and r.round == 3 and r.r_dsc is not None for r in recs)
    assert score_pool(model, samples, round=3) == recs
    assert score_pool(model, []) == []


# -- rounds -----------------------------------------------------------------

@pytest.fixture
def round_setup(small_cfg, small_data):
    store = _store(small_data)
    state = init_state(store, 4, seed=0)
    return state, Learner.fresh(small_cfg, FAST), store


def test_run_round_invariants(round_setup, small_data):
    state, learner, store = round_setup
    before_w = learner.model.params["head_f.weight"].data.copy()
    new, new_learner, m = run_round(state, learner, store, small_data.val, small_data.test, FAST,
                                    QueryPolicy("consistency_high", 5))
    assert new.round == 1 and len(new.labeled) == 9 and len(new.unlabeled) == 15
    assert set(new.labeled) | set(new.unlabeled) == set(store)
    assert m.round == 0 and m.labels_used == 4 and len(m.scores) == 20
    assert 0 <= m.test_dsc <= 1 and 0 <= m.val_dsc <= 1
    # inputs untouched
    assert state.round == 0 and len(state.labeled) == 4 and state.history == []
    np.testing.assert_array_equal(learner.model.params["head_f.weight"].data, before_w)
    assert not np.array_equal(new_learner.model.params["head_f.weight"].data, before_w)


def test_run_round_warm_starts(round_setup, small_data):
    state, learner, store = round_setup
    pol = QueryPolicy("consistency_high", 5)
    s1, l1, _ = run_round(state, learner, store, small_data.val, small_data.test, FAST, pol)
    w1 = l1.model.params["enc0.conv1.weight"].data.copy()
    _, l2, _ = run_round(s1, l1, store, small_data.val, small_data.test, FAST, pol)
    fresh = Learner.fresh(l1.model.config, FAST).model.params["enc0.conv1.weight"].data
    # second round continues from w1, so it stays closer to w1 than to a fresh init
    w2 = l2.model.params["enc0.conv1.weight"].data
    assert np.abs(w2 - w1).max() < np.abs(w2 - fresh).max()
    assert l2.optimizer.t > l1.optimizer.t


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_round_divergence_keeps_state(round_setup, small_data):
    state, learner, store = round_setup
    learner.model.params["enc0.conv1.weight"].data[:] = np.inf
    with pytest.raises(TrainingDivergedError):
        run_round(state, learner, store, small_data.val, small_data.test, FAST, QueryPolicy())
    assert state.round == 0 and len(state.labeled) == 4 and state.history == []


def test_run_round_empty_pool_rejected(small_cfg, small_data):
    store = _store(small_data)
    state = ALState(sorted(store), [], 0, [], 0)
    with pytest.raises(ValueError):
        run_round(state, Learner.fresh(small_cfg, FAST), store, [], small_data.test, FAST, QueryPolicy())


def _history(small_cfg, small_data, kind, budget=14, seed=0):
    return run_policy(small_data.train, small_data.val, small_data.test, small_cfg, FAST,
                      QueryPolicy(kind, 5), 4, budget, seed)


def test_budget_rounds_and_labels(small_cfg, small_data):
    hist = _history(small_cfg, small_data, "consistency_high", budget=19)
    assert [m.labels_used for m in hist] == [4, 9, 14, 19]
    assert [m.round for m in hist] == [0, 1, 2, 3]
    assert hist[-1].scores and len(hist[-1].scores) == 5


def test_budget_partial_last_query(small_cfg, small_data):
    hist = _history(small_cfg, small_data, "random", budget=12)
    assert [m.labels_used for m in hist] == [4, 9, 12]


def test_budget_equal_to_pool_trains_on_everything(small_cfg, small_data):
    hist = _history(small_cfg, small_data, "consistency_high", budget=None)
    assert [m.labels_used for m in hist] == [4, 9, 14, 19, 24]
    assert hist[-1].scores == []


def test_run_policy_deterministic(small_cfg, small_data):
    a = _history(small_cfg, small_data, "random")
    b = _history(small_cfg, small_data, "random")
    assert [(m.test_dsc, m.val_dsc, m.scores, m.train_loss) for m in a] == \
           [(m.test_dsc, m.val_dsc, m.scores, m.train_loss) for m in b]


def test_policies_share_first_round(small_cfg, small_data):
    high = _history(small_cfg, small_data, "consistency_high")
    rand = _history(small_cfg, small_data, "random")
    assert high[0].test_dsc == rand[0].test_dsc and high[0].scores == rand[0].scores
    assert high[1].scores != rand[1].scores


def test_run_experiment_curves(small_cfg, small_data):
    curves = run_experiment(small_data.train, small_data.val, small_data.test, small_cfg, FAST,
                            [QueryPolicy("consistency_high", 5), QueryPolicy("random", 5)], seeds=[0, 1],
                            n_init=4, label_budget=9, reference_epochs=1)
    assert sorted(curves) == sorted([(p, s) for p in ("consistency_high", "random", "full") for s in (0, 1)])
    assert all(len(curves[(p, s)]) == 2 for p in ("consistency_high", "random") for s in (0, 1))
    assert curves[("full", 0)][0].labels_used == 24
    assert curves[("random", 0)][0].scores != curves[("random", 1)][0].scores


def test_round_metrics_summaries():
    from dsal.active import RoundMetrics
    m = RoundMetrics(0, 10, 0.5, 0.5, [ScoreRecord(str(i), 0, 0, v, v * 2, 0) for i, v in enumerate([0.1, 0.2, 0.3])])
    assert abs(m.mean_pool_score - 0.2) <= 1e-12
    assert m.spearman_score_vs_rdsc == 1.0
    assert RoundMetrics(0, 10, 0.5, 0.5).mean_pool_score is None
