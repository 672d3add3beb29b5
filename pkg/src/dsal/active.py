"""Pool-based active learning driven by deep-supervision head consistency.

Each round fine-tunes the current model on every labeled sample, evaluates it,
scores the unlabeled pool, and asks the simulated oracle for masks of the
selected samples.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Sample, stack
from .metrics import ScoreRecord, consistency_scores, evaluate, spearman_rank
from .segnet import HEADS, Adam, Model, PredictionSet, build_model, predict, train_epochs

POLICY_KINDS = ("consistency_high", "consistency_low", "random")


@dataclass(frozen=True)
class QueryPolicy:
    kind: str = "consistency_high"
    k: int = 10

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.k < 1:
            raise ValueError(f"query size k must be >= 1, got {self.k}")


@dataclass
class RoundMetrics:
    round: int
    labels_used: int
    test_dsc: float
    val_dsc: float
    scores: List[ScoreRecord] = field(default_factory=list)
    train_loss: float = float("nan")

    @property
    def mean_pool_score(self) -> Optional[float]:
        if not self.scores:
            return None
        return float(np.mean([s.mean_score for s in self.scores]))

    @property
    def spearman_score_vs_rdsc(self) -> Optional[float]:
        pairs = [(s.mean_score, s.r_dsc) for s in self.scores if s.r_dsc is not None]
        if len(pairs) < 3:
            return None
        xs, ys = zip(*pairs)
        return spearman_rank(xs, ys)


@dataclass
class ALState:
    labeled: List[str]
    unlabeled: List[str]
    round: int = 0
    history: List[RoundMetrics] = field(default_factory=list)
    rng_seed: int = 0

    @property
    def pool(self) -> List[str]:
        return sorted(self.labeled + self.unlabeled)

    def check(self) -> None:
        lab, unl = set(self.labeled), set(self.unlabeled)
        if len(lab) != len(self.labeled) or len(unl) != len(self.unlabeled):
            raise AssertionError("duplicate ids in pool partition")
        if lab & unl:
            raise AssertionError(f"ids both labeled and unlabeled: {sorted(lab & unl)[:5]}")


class AnnotationError(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_round: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3


def init_state(pool_ids: Iterable[str], n_init: int, seed: int) -> ALState:
    """Draw ``n_init`` ids uniformly without replacement as the initial labeled set."""
    ids = sorted(pool_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("pool ids must be unique")
    if not 0 <= n_init <= len(ids):
        raise ValueError(f"n_init={n_init} exceeds pool size {len(ids)}")
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(len(ids), size=n_init, replace=False).tolist())
    labeled = [ids[i] for i in sorted(picked)]
    unlabeled = [ids[i] for i in range(len(ids)) if i not in picked]
    return ALState(labeled, unlabeled, 0, [], seed)


def score_pool(model: Model, samples: Sequence[Sample], round: int = 0,
               batch_size: int = 32) -> List[ScoreRecord]:
    """Consistency record per sample, sorted by id; ``r_dsc`` filled when a mask is known."""
    samples = sorted(samples, key=lambda s: s.id)
    if not samples:
        return []
    images = np.stack([s.image for s in samples])
    probs = predict(model, images, batch_size=batch_size)
    records = []
    for i, s in enumerate(samples):
        preds = PredictionSet(*(probs[h][i] for h in HEADS))
        records.append(consistency_scores(preds, s.id, round, truth=s.mask))
    return records


def select(scores: Sequence[ScoreRecord], policy: QueryPolicy,
           rng: Optional[np.random.Generator] = None) -> List[str]:
    """Pick ``min(k, len(scores))`` ids.

    ``consistency_high`` takes the largest mean scores, ``consistency_low`` the
    smallest; equal scores are broken by ascending id. ``random`` draws
    uniformly without replacement from the id-sorted pool.
    """
    recs = sorted(scores, key=lambda r: r.sample_id)
    k = min(policy.k, len(recs))
    if k == 0:
        return []
    if policy.kind == "random":
        if rng is None:
            raise ValueError("random policy needs an rng")
        idx = rng.choice(len(recs), size=k, replace=False)
        return [recs[i].sample_id for i in sorted(idx.tolist())]
    sign = -1.0 if policy.kind == "consistency_high" else 1.0
    ranked = sorted(recs, key=lambda r: (sign * r.mean_score, r.sample_id))
    return [r.sample_id for r in ranked[:k]]


def oracle_annotate(state: ALState, ids: Sequence[str], store: Dict[str, Sample]) -> List[Sample]:
    """Reveal stored masks for ``ids`` and move them into the labeled set.

    All ids are validated before the state is touched.
    """
    ids = list(ids)
    unl = set(state.unlabeled)
    lab = set(state.labeled)
    if len(set(ids)) != len(ids):
        raise AnnotationError("duplicate ids in annotation request")
    for i in ids:
        if i in lab:
            raise AnnotationError(f"{i} is already labeled")
        if i not in unl:
            raise AnnotationError(f"{i} is not in the unlabeled pool")
        if i not in store or store[i].mask is None:
            raise AnnotationError(f"no ground truth stored for {i}")
    out = []
    for i in ids:
        s = store[i]
        out.append(Sample(s.id, s.image, s.mask, labeled=True))
    picked = set(ids)
    state.labeled = sorted(lab | picked)
    state.unlabeled = [u for u in state.unlabeled if u not in picked]
    return out


def _round_rng(seed: int, round_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(round_index), int(stream)])


@dataclass
class Learner:
    """Model plus optimizer state; carried across rounds for warm-start fine-tuning."""
    model: Model
    optimizer: Adam

    @classmethod
    def fresh(cls, model_config, train: TrainConfig) -> "Learner":
        return cls(build_model(model_config), Adam(lr=train.learning_rate))

    def copy(self) -> "Learner":
        return Learner(self.model.copy(), copy.deepcopy(self.optimizer))


def run_round(state: ALState, learner: Learner, store: Dict[str, Sample], val: Sequence[Sample],
              test: Sequence[Sample], train: TrainConfig, policy: QueryPolicy,
              query_limit: Optional[int] = None) -> Tuple[ALState, Learner, RoundMetrics]:
    """Fine-tune on all labeled samples, evaluate, score the pool, then query.

    ``query_limit`` caps how many ids are requested this round (0 = evaluate
    and score only). The input state and learner are never modified; on
    divergence the exception propagates and the caller keeps its old state.
    """
    if not state.unlabeled and (query_limit is None or query_limit > 0):
        raise ValueError("unlabeled pool is empty")
    new_learner = learner.copy()
    labeled = [store[i] for i in state.labeled]
    x, y = stack(labeled)
    losses = train_epochs(new_learner.model, x, y, new_learner.optimizer, train.epochs_per_round,
                          train.batch_size, _round_rng(state.rng_seed, state.round, 0))
    model = new_learner.model
    test_dsc = evaluate(model, *stack(list(test))) if test else float("nan")
    val_dsc = evaluate(model, *stack(list(val))) if val else float("nan")
    scores = score_pool(model, [store[i] for i in state.unlabeled], state.round)
    metrics = RoundMetrics(state.round, len(state.labeled), test_dsc, val_dsc, scores,
                           losses[-1] if losses else float("nan"))

    new_state = ALState(list(state.labeled), list(state.unlabeled), state.round,
                        list(state.history) + [metrics], state.rng_seed)
    k = policy.k if query_limit is None else min(policy.k, query_limit)
    if k > 0 and new_state.unlabeled:
        chosen = select(scores, QueryPolicy(policy.kind, k), _round_rng(state.rng_seed, state.round, 1))
        oracle_annotate(new_state, chosen, store)
        new_state.round += 1
    new_state.check()
    return new_state, new_learner, metrics


def run_policy(train_pool: Sequence[Sample], val: Sequence[Sample], test: Sequence[Sample],
               model_config, train: TrainConfig, policy: QueryPolicy, n_init: int,
               label_budget: Optional[int], seed: int, on_round=None) -> List[RoundMetrics]:
    """Run rounds until the label budget or the pool is exhausted.

    The last round trains on the final labeled set and only evaluates.
    ``on_round(state, learner, metrics)`` is called after every round.
    """
    store = {s.id: s for s in train_pool}
    budget = len(store) if label_budget is None else min(label_budget, len(store))
    if budget < n_init:
        raise ValueError(f"label budget {budget} is below n_init {n_init}")
    state = init_state(store, n_init, seed)
    learner = Learner.fresh(_with_seed(model_config, seed), train)
    while True:
        remaining = budget - len(state.labeled)
        final = remaining <= 0 or not state.unlabeled
        state, learner, metrics = run_round(state, learner, store, val, test, train, policy,
                                            query_limit=0 if final else remaining)
        if on_round is not None:
            on_round(state, learner, metrics)
        if final:
            return state.history


def run_reference(train_pool: Sequence[Sample], val: Sequence[Sample], test: Sequence[Sample],
                  model_config, train: TrainConfig, epochs: int, seed: int, on_done=None) -> RoundMetrics:
    """Full-annotation baseline: a fresh model trained on the whole pool."""
    learner = Learner.fresh(_with_seed(model_config, seed), train)
    x, y = stack(sorted(train_pool, key=lambda s: s.id))
    losses = train_epochs(learner.model, x, y, learner.optimizer, epochs, train.batch_size,
                          _round_rng(seed, 0, 2))
    metrics = RoundMetrics(0, len(x), evaluate(learner.model, *stack(list(test))),
                           evaluate(learner.model, *stack(list(val))) if val else float("nan"),
                           [], losses[-1] if losses else float("nan"))
    if on_done is not None:
        on_done(learner, metrics)
    return metrics


def _with_seed(model_config, seed: int):
    return replace(model_config, seed=int(seed))


def run_experiment(train_pool, val, test, model_config, train: TrainConfig,
                   policies: Sequence[QueryPolicy], seeds: Sequence[int], n_init: int = 10,
                   label_budget: Optional[int] = None, reference_epochs: int = 0,
                   on_round=None) -> Dict[Tuple[str, int], List[RoundMetrics]]:
    """Learning curves for every (policy, seed); key ``("full", seed)`` holds the reference."""
    curves = {}
    for seed in seeds:
        for policy in policies:
            cb = None if on_round is None else (lambda st, le, me, p=policy.kind, s=seed: on_round(p, s, st, le, me))
            curves[(policy.kind, seed)] = run_policy(train_pool, val, test, model_config, train, policy,
                                                     n_init, label_budget, seed, cb)
        if reference_epochs > 0:
            curves[("full", seed)] = [run_reference(train_pool, val, test, model_config, train,
                                                    reference_epochs, seed)]
    return curves
