"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 4-6 share a single experiment on the default dataset (five seeds,
two policies, full-annotation references); it takes roughly an hour on one
CPU core.
"""

import dataclasses
import time

import numpy as np
import pytest

from conftest import record_criterion
from dsal import cli
from dsal.active import QueryPolicy, TrainConfig, run_policy, run_reference
from dsal.config import parse_config
from dsal.data import DatasetConfig, Sample, load_pair, make_dataset, save_pair
from dsal.metrics import dsc
from dsal.segnet import (
    LossWeights,
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from dsal.tensor import (
    Tensor,
    _make,
    concat_channels,
    conv2d,
    grad_check,
    maxpool2d,
    relu,
    softmax_channels,
    upsample_bilinear,
)
from test_metrics import dsc_by_sets
from test_segnet import _model_grad_error

SEEDS = (0, 1, 2, 3, 4)
POOL = 139
BUDGET = int(0.6 * POOL)  # 83 labels
TRAIN = TrainConfig(epochs_per_round=20, batch_size=8, learning_rate=1e-3)


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    def weighted(y, m):
        return _make(y.data * m, (y,), lambda g: (g * m,))

    w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    xin = rng.standard_normal((2, 2, 6, 6))
    m3, m5 = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
    other = rng.standard_normal((2, 2, 4, 4))
    kinked = rng.standard_normal((2, 3, 6, 6))
    kinked = np.sign(kinked) * (0.1 + np.abs(kinked)) + 1e-3 * np.arange(kinked.size).reshape(kinked.shape)
    cases = {
        "conv2d/input": (lambda t: conv2d(t, Tensor(w), Tensor(b), padding=1), xin),
        "conv2d/kernel": (lambda t: conv2d(Tensor(xin), t, Tensor(b), padding=1), w),
        "conv2d/bias": (lambda t: conv2d(Tensor(xin), Tensor(w), t, padding=1), b),
        "conv2d/stride2": (lambda t: conv2d(t, Tensor(w), stride=2, padding=1), xin),
        "maxpool2d": (maxpool2d, kinked),
        "upsample_bilinear": (lambda t: upsample_bilinear(t, 2), rng.standard_normal((2, 2, 3, 3))),
        "softmax_channels": (lambda t: weighted(softmax_channels(t), m3), rng.standard_normal((2, 3, 4, 4))),
        "concat_channels": (lambda t: weighted(concat_channels(t, Tensor(other)), m5), rng.standard_normal((2, 3, 4, 4))),
        "relu": (relu, kinked),
    }
    errors = {name: grad_check(op, x) for name, (op, x) in cases.items()}
    prim_ok = max(errors.values()) <= 1e-4

    cfg = ModelConfig(depth=2, base_channels=2, input_size=(8, 8), dtype="float64", seed=1)
    x = rng.random((2, 1, 8, 8))
    y = (rng.random((2, 8, 8)) > 0.5).astype(np.uint8)
    model_err = _model_grad_error(cfg, x, y)
    elapsed = time.perf_counter() - start
    ok = prim_ok and model_err <= 1e-3 and elapsed < 60
    record_criterion(1, ok, f"max primitive rel err {max(errors.values()):.2e} (<=1e-4), "
                            f"tiny model {model_err:.2e} (<=1e-3), {elapsed:.1f}s (<60s)")
    assert ok, errors


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_dsc_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    pairs = []
    for i in range(100):
        a = rng.random((32, 32)) < rng.uniform(0, 0.6)
        b = rng.random((32, 32)) < rng.uniform(0, 0.6)
        if i == 0:
            a[:] = b[:] = False
        elif i == 1:
            a[:] = False
        pairs.append((a, b))
    for a, b in pairs:
        mismatches += dsc(a, b) != dsc_by_sets(a, b)
    ok = mismatches == 0 and dsc(*pairs[0]) == 1.0 and dsc(*pairs[1]) == 0.0
    record_criterion(2, ok, f"{100 - mismatches}/100 pairs exact, empty conventions 1.0/0.0")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_loss_reduction():
    data = make_dataset(DatasetConfig(n_train=4, n_val=0, n_test=0, seed=1))
    x = np.stack([s.image for s in data.train])
    y = np.stack([s.mask for s in data.train])

    base = ModelConfig(loss_weights=LossWeights(0.0, 0.0, 1.0))
    full, single = build_model(base), build_model(base)
    a = loss(forward(full, x), y, base.loss_weights)
    b = loss(forward(single, x, heads=("f",)), y, base.loss_weights)
    a.total.backward()
    b.total.backward()
    same_total = float(a.total) == float(b.total)
    same_grads = all(full.params[n].grad.tobytes() == single.params[n].grad.tobytes() for n in full.trunk_params)

    model = build_model(ModelConfig())
    total, (ll, lm, lf) = loss(forward(model, x), y).values()
    exact = total == 0.1 * ll + 0.3 * lm + 0.6 * lf
    ok = same_total and same_grads and exact
    record_criterion(3, ok, f"alpha=(0,0,1) total/grads bit-identical: {same_total}/{same_grads}; "
                            f"default total == 0.1*Ll+0.3*Lm+0.6*Lf exactly: {exact}")
    assert ok


# -- shared experiment for 4, 5, 6 --------------------------------------------

@pytest.fixture(scope="session")
def experiment():
    splits = make_dataset(DatasetConfig())
    model_cfg = ModelConfig()
    curves, refs, ref_seconds = {}, {}, {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        refs[seed] = run_reference(splits.train, splits.val, splits.test, model_cfg, TRAIN, 100, seed)
        ref_seconds[seed] = time.perf_counter() - t0
        for kind in ("consistency_high", "random"):
            curves[(kind, seed)] = run_policy(splits.train, splits.val, splits.test, model_cfg, TRAIN,
                                              QueryPolicy(kind, 10), 10, BUDGET, seed)
    return curves, refs, ref_seconds


@pytest.mark.slow
def test_criterion_4_training_sanity(experiment):
    _, refs, seconds = experiment
    value, took = refs[0].test_dsc, seconds[0]
    ok = value >= 0.85 and took <= 15 * 60
    others = ", ".join(f"{refs[s].test_dsc:.4f}" for s in SEEDS[1:])
    record_criterion(4, ok, f"seed 0 test DSC {value:.4f} (>=0.85) in {took / 60:.1f} min (<=15); "
                            f"other seeds {others}")
    assert ok


@pytest.mark.slow
def test_criterion_5_consistency_correlation(experiment):
    curves, _, _ = experiment
    rhos, pools = [], []
    for seed in SEEDS:
        m = curves[("consistency_high", seed)][2]
        assert m.round == 2
        pools.append(len(m.scores))
        rhos.append(m.spearman_score_vs_rdsc)
    passing = sum(r is not None and r >= 0.3 for r in rhos)
    ok = passing >= 4 and min(pools) >= 100
    shown = ", ".join("undef" if r is None else f"{r:.3f}" for r in rhos)
    record_criterion(5, ok, f"round-2 rho per seed [{shown}], {passing}/5 >= 0.3 (need 4), pool {min(pools)}")
    assert ok


@pytest.mark.slow
def test_criterion_6_learning_curves(experiment):
    curves, refs, _ = experiment
    full = float(np.mean([refs[s].test_dsc for s in SEEDS]))

    def mean_curve(kind):
        points = {}
        for seed in SEEDS:
            for m in curves[(kind, seed)]:
                points.setdefault(m.labels_used, []).append(m.test_dsc)
        return {k: float(np.mean(v)) for k, v in sorted(points.items()) if len(v) == len(SEEDS)}

    high, rand = mean_curve("consistency_high"), mean_curve("random")
    reach = next((k for k, v in high.items() if v >= 0.95 * full), None)
    common = sorted(set(high) & set(rand))
    gaps = {k: high[k] - rand[k] for k in common}
    worst = min(gaps, key=gaps.get)
    ok = reach is not None and reach <= 0.6 * POOL and gaps[worst] >= -0.02
    record_criterion(6, ok, f"full DSC {full:.4f}; high reaches 95% at {reach} labels (<= {0.6 * POOL:.1f}); "
                            f"worst high-random gap {gaps[worst]:+.4f} at {worst} labels (>= -0.02)")
    print("labels  high    random")
    for k in common:
        print(f"{k:6d}  {high[k]:.4f}  {rand[k]:.4f}")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_determinism(tmp_path):
    text = """
[dataset]
resolution = 32x32
n_train = 30
n_val = 4
n_test = 6
[model]
depth = 2
base_channels = 4
[experiment]
n_init = 10
label_budget = 30
epochs_per_round = 2
reference_epochs = 2
seeds = 0, 1
"""
    base = dataclasses.replace(parse_config(text), data_dir=str(tmp_path / "data"))
    cli.cmd_generate(base)
    outputs = []
    for name in ("a", "b"):
        cfg = dataclasses.replace(base, output_dir=str(tmp_path / name))
        cli.cmd_run(cfg, checkpoints=False)
        outputs.append(tuple((tmp_path / name / f).read_bytes() for f in ("metrics.csv", "scores.csv")))
    ok = outputs[0] == outputs[1]
    record_criterion(7, ok, f"two cmd_run executions byte-identical: {ok} ({len(outputs[0][0])} bytes metrics)")
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_criterion_8_io_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    pgm_ok = True
    for i in range(20):
        h, w = rng.integers(8, 80, size=2)
        raw = rng.integers(0, 256, size=(h, w)).astype(np.float32) / 255
        s = Sample(f"r{i}", raw[None], (rng.random((h, w)) < 0.3).astype(np.uint8))
        ip, mp = save_pair(s, tmp_path / "pgm")
        back = load_pair(ip, mp, sample_id=s.id)
        pgm_ok &= back.image.tobytes() == s.image.tobytes() and back.mask.tobytes() == s.mask.tobytes()

    ckpt_ok = True
    for i in range(5):
        cfg = ModelConfig(depth=int(rng.integers(2, 4)), base_channels=int(rng.integers(1, 6)),
                          input_size=(16, 16), seed=int(rng.integers(0, 2 ** 31)))
        model = build_model(cfg)
        for t in model.params.values():
            t.data = rng.standard_normal(t.shape).astype(np.float32)
        path = tmp_path / f"m{i}.ckpt"
        save_checkpoint(model, path, round_index=i)
        loaded, rnd = load_checkpoint(path)
        ckpt_ok &= rnd == i and loaded.config == cfg and all(
            loaded.params[n].data.tobytes() == t.data.tobytes() for n, t in model.params.items())
    ok = pgm_ok and ckpt_ok
    record_criterion(8, ok, f"20 random PGM pairs bit-exact: {pgm_ok}; 5 random checkpoints bit-exact: {ckpt_ok}")
    assert ok
