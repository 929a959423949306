"""The ten acceptance criteria, one test each, at their stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary (see conftest.py).
Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import json
import time
import warnings
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from cvrnet import cli
from cvrnet.checkpoint import checkpoint_bytes, load_checkpoint, load_into, save_checkpoint
from cvrnet.data import AugmentConfig, check_fold_plan, make_folds, scan_dataset
from cvrnet.metrics import ConfusionMatrix, ZeroDivisionWarning, aggregate, confusion_to_csv, per_class_metrics
from cvrnet.model import ModelConfig, build
from cvrnet.reference import FIXTURES
from cvrnet.synthetic import TOY_CONFIG
from cvrnet.training import PlateauScheduler, TrainConfig, evaluate_loss, fit, overfit_single_batch
from cvrnet.verify import run_gradcheck_suite

LR0 = 1e-4
TOY_EPOCHS = 30
TIME_LIMIT = 300.0


# 1 ---------------------------------------------------------------------------------


def test_criterion_01_shape_conformance():
    t0 = time.perf_counter()
    model = build(ModelConfig(224, 224, 2, Fraction(1)), init_seed=0)
    taps = model.head_input_shapes()
    elapsed = time.perf_counter() - t0
    assert taps == {"P1": (1, 28, 28, 512), "P2": (1, 14, 14, 1024), "P3": (1, 7, 7, 4096),
                    "P4": (1, 28, 28, 512), "P5": (1, 14, 14, 1024)}
    shapes = model.tap_shapes()
    assert (shapes["E13"], shapes["E14"], shapes["E23"], shapes["E24"]) == (
        (1, 28, 28, 512), (1, 14, 14, 1024), (1, 28, 28, 512), (1, 14, 14, 1024))
    assert shapes["E15"][-1] + shapes["E25"][-1] == 4096
    assert elapsed < 10.0


# 2 ---------------------------------------------------------------------------------


def test_criterion_02_gradient_certification():
    t0 = time.perf_counter()
    outcomes = run_gradcheck_suite(n_seeds=20, include_model=False)
    elapsed = time.perf_counter() - t0
    failed = [f"{o.name}: {o.detail}" for o in outcomes if not o.ok]
    assert not failed, failed
    assert len(outcomes) >= 28
    assert elapsed < TIME_LIMIT


# 3 ---------------------------------------------------------------------------------


def test_criterion_03_published_fixture_metrics(tmp_path):
    paths = {}
    for task, fx in FIXTURES.items():
        paths[task] = tmp_path / f"{task}.csv"
        paths[task].write_text(confusion_to_csv(fx.confusion()))
    t0 = time.perf_counter()
    results = {}
    for task, path in paths.items():
        out = tmp_path / f"{task}.json"
        assert cli.main(["metrics", "--cm", str(path), "--format", "json", "--out", str(out)]) == 0
        results[task] = json.loads(out.read_text())["weighted"]
    elapsed = time.perf_counter() - t0
    for task, fx in FIXTURES.items():
        for key, reported in fx.reported.items():
            assert abs(results[task][key] - reported) <= 0.005, (task, key, results[task][key], reported)
    assert round(results["task1"]["accuracy"], 4) == 0.9976
    assert round(results["task4"]["accuracy"], 4) == 0.9610
    assert round(results["task5"]["accuracy"], 4) == 0.7833
    assert elapsed < 1.0


# 4 ---------------------------------------------------------------------------------


def test_criterion_04_ensemble_identity():
    model = build(TOY_CONFIG, init_seed=0)
    rng = np.random.default_rng(4)
    for i in range(100):
        x = rng.standard_normal((int(rng.integers(1, 5)), 32, 32, 3)).astype(np.float32)
        out = model.forward(x, train=bool(i % 2))
        np.testing.assert_allclose(out.ensemble, np.mean(out.probs, axis=0), rtol=0, atol=1e-6)
        for p in out.probs + [out.ensemble]:
            np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-5)


# 5 ---------------------------------------------------------------------------------


def test_criterion_05_metric_identity():
    rng = np.random.default_rng(5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroDivisionWarning)
        for _ in range(1000):
            k = int(rng.integers(2, 5))
            counts = rng.integers(0, int(rng.choice([4, 100, 5000])), (k, k))
            counts[0, 0] += 1
            per_class, _ = per_class_metrics(ConfusionMatrix(counts), exact=True)
            agg = aggregate(per_class, "weighted")
            assert isinstance(agg["recall"], Fraction)
            assert agg["recall"] == agg["accuracy"]


# 6 ---------------------------------------------------------------------------------


def _set_algebra_violations(plan, labels):
    n = len(labels)
    everything = set(range(n))
    bad = []
    tests = []
    for f, fold in enumerate(plan.folds):
        tr, va, te = set(fold.train), set(fold.val), set(fold.test)
        if len(tr) + len(va) + len(te) != n or tr | va | te != everything:
            bad.append(f"fold {f} is not a partition")
        tests.append(te)
    for a in range(len(tests)):
        for b in range(a + 1, len(tests)):
            if tests[a] & tests[b]:
                bad.append(f"test sets {a} and {b} intersect")
    if set().union(*tests) != everything:
        bad.append("test sets do not cover the dataset")
    for c in np.unique(labels):
        share = np.sum(labels == c) / plan.k
        for f, te in enumerate(tests):
            if abs(sum(1 for i in te if labels[i] == c) - share) >= 1:
                bad.append(f"fold {f} class {c} not stratified")
    return bad


def test_criterion_06_fold_plan_algebra():
    rng = np.random.default_rng(6)
    for trial in range(200):
        k_classes = int(rng.integers(2, 5))
        n = int(rng.integers(5 * k_classes, 501))
        sizes = rng.multinomial(n - 5 * k_classes, rng.dirichlet(np.ones(k_classes))) + 5
        labels = rng.permutation(np.repeat(np.arange(k_classes), sizes))
        plan = make_folds(labels, k=5, seed=trial)
        assert _set_algebra_violations(plan, labels) == [], trial
        assert check_fold_plan(plan, labels) == [], trial


# 7 and 8 ---------------------------------------------------------------------------


def _toy_run(toy_data, out_dir):
    index = scan_dataset(toy_data)
    plan = make_folds(index, k=5, seed=0)
    model = build(TOY_CONFIG, init_seed=0)
    cfg = TrainConfig(epochs=TOY_EPOCHS, batch_size=16, seed=0)
    report, best = fit(model, index, plan, 0, cfg, AugmentConfig(), out_dir=out_dir, timing=False)
    return index, plan, model, report, best


@pytest.fixture(scope="module")
def toy_run(toy_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    t0 = time.perf_counter()
    result = _toy_run(toy_data, out)
    return result, time.perf_counter() - t0, out


def test_criterion_07_toy_training(toy_run):
    (index, plan, model, report, _), elapsed, _ = toy_run
    fold = plan.fold(0)
    _, train_acc, _ = evaluate_loss(model, index, fold.train, 32)
    _, test_acc, _ = evaluate_loss(model, index, fold.test, 32)
    assert len(report.epochs) <= TOY_EPOCHS
    assert train_acc >= 0.95, train_acc
    assert test_acc >= 0.90, test_acc
    assert elapsed < TIME_LIMIT

    overfit_model = build(TOY_CONFIG, init_seed=1)
    rng = np.random.default_rng(7)
    x = rng.random((4, 32, 32, 3)).astype(np.float32)
    y = np.eye(2, dtype=np.float32)[[0, 1, 1, 0]]
    overfit_single_batch(overfit_model, x, y, 500)
    assert overfit_model.loss(overfit_model.forward(x, train=True), y) < 0.01


def test_criterion_08_determinism(toy_run, toy_data, tmp_path):
    (_, _, model_a, report_a, best_a), _, out_a = toy_run
    _, _, model_b, report_b, best_b = _toy_run(toy_data, tmp_path)
    assert report_a.to_jsonl(timing=False) == report_b.to_jsonl(timing=False)
    assert best_a == best_b
    assert (out_a / "train_report.jsonl").read_bytes() == (tmp_path / "train_report.jsonl").read_bytes()
    assert (out_a / "best.ckpt").read_bytes() == (tmp_path / "best.ckpt").read_bytes()
    assert checkpoint_bytes(model_a) == checkpoint_bytes(model_b)


# 9 ---------------------------------------------------------------------------------


def test_criterion_09_scheduler_conformance():
    """All improve/flat sequences of length <= 30, via the product of scheduler and oracle states.

    The oracle counts completed 12-epoch runs of non-improvement. Prefixes that
    reach the same joint state agree on every continuation, so one visit per
    joint state and depth covers all 2**31 - 1 sequences.
    """
    first = PlateauScheduler(LR0)
    first.step(10.0)
    frontier = {(0, LR0, 0, 0): (first, 0, 0)}
    checked = 0
    for depth in range(1, 31):
        nxt = {}
        for sched, run, fired in frontier.values():
            for improve in (True, False):
                s = replace(sched)
                s.step(s.best - 1.0 if improve else s.best)
                r = 0 if improve else run + 1
                f = fired + (r == 12)
                r %= 12
                expected = max(LR0 * 0.1**f, 1e-7)
                assert s.lr == pytest.approx(expected, rel=1e-12), (depth, improve, s.lr, expected)
                nxt[(s.epochs_since_improvement, s.lr, r, f)] = (s, r, f)
                checked += 1
        frontier = nxt
    assert checked > 30


# 10 --------------------------------------------------------------------------------


def test_criterion_10_checkpoint_roundtrip(tmp_path):
    model = build(TOY_CONFIG, init_seed=10)
    model.forward(np.random.default_rng(10).standard_normal((2, 32, 32, 3)).astype(np.float32), train=True)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.params.names() == model.params.names()
    for name, value in model.params.items():
        assert loaded.params[name].tobytes() == value.tobytes(), name

    other = build(replace(TOY_CONFIG, num_classes=3), init_seed=11)
    report = load_into(other, tmp_path / "m.ckpt", partial=True)
    encoder = [n for n in model.params.names() if n.startswith(("enc1.", "enc2."))]
    assert set(encoder) <= set(report.imported)
    for name in encoder:
        np.testing.assert_array_equal(other.params[name], model.params[name])
    rejected = {n for n, _ in report.rejected}
    assert rejected == {f"head.P{i}.fc4.{p}" for i in range(1, 6) for p in ("weights", "bias")}
    assert "rejected head.P1.fc4.weights" in report.summary()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
