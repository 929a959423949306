import json

import numpy as np
import pytest

from cvrnet import cli
from cvrnet.checkpoint import save_checkpoint
from cvrnet.data import FoldPlan, check_fold_plan, scan_dataset, write_dataset
from cvrnet.metrics import confusion_to_csv
from cvrnet.model import build
from cvrnet.reference import FIXTURES
from cvrnet.synthetic import TOY_CONFIG
from cvrnet.training import NumericalError

TOY_CFG = "input_size = 32\nwidth_multiplier = 1/8\nepochs = 1\nbatch_size = 16\n"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CFG)
    return path


# -- split -----------------------------------------------------------------------


def test_split_writes_identical_plans(capsys, toy_data, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(capsys, "split", "--data", toy_data, "--k", 5, "--seed", 1, "--out", a)[0] == 0
    code, out, _ = run(capsys, "split", "--data", toy_data, "--k", 5, "--seed", 1, "--out", b)
    assert code == 0 and a.read_bytes() == b.read_bytes()
    assert "test" in out
    plan = FoldPlan.load(a)
    assert check_fold_plan(plan, scan_dataset(toy_data).labels) == []


def test_split_task1_layout_counts(capsys, tmp_path):
    tiny = np.zeros((1, 1), dtype=np.uint8)
    write_dataset(tmp_path / "d", {"NOR": [tiny] * 5856, "NCP": [tiny] * 500})
    code, out, _ = run(capsys, "split", "--data", tmp_path / "d", "--out", tmp_path / "plan.json")
    assert code == 0
    index = scan_dataset(tmp_path / "d")
    plan = FoldPlan.load(tmp_path / "plan.json")
    nor, ncp = index.class_names.index("NOR"), index.class_names.index("NCP")
    for fold in plan.folds:
        counts = np.bincount(index.labels[fold.test], minlength=2)
        assert counts[nor] in (1171, 1172) and counts[ncp] == 100


def test_split_missing_data_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "split", "--out", tmp_path / "p.json")
    assert code == 2 and "--data" in err


def test_unknown_command_and_flag(capsys):
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "split", "--nope")[0] == 2


# -- metrics ---------------------------------------------------------------------


@pytest.mark.parametrize("task, accuracy", [("task1", "0.9976"), ("task4", "0.9610"), ("task5", "0.7833")])
def test_metrics_on_fixture_csv(capsys, tmp_path, task, accuracy):
    path = tmp_path / f"{task}.csv"
    path.write_text(confusion_to_csv(FIXTURES[task].confusion()))
    code, out, _ = run(capsys, "metrics", "--cm", path, "--format", "json")
    assert code == 0
    assert f"{json.loads(out)['weighted']['accuracy']:.4f}" == accuracy


def test_metrics_identity_matrix(capsys, tmp_path):
    path = tmp_path / "eye.csv"
    path.write_text("predicted\\actual,a,b\na,1,0\nb,0,1\n")
    code, out, _ = run(capsys, "metrics", "--cm", path, "--format", "json")
    rep = json.loads(out)
    assert code == 0
    assert all(rep[mode][k] == 1.0 for mode in ("weighted", "macro") for k in rep[mode])


def test_metrics_writes_out_file(capsys, tmp_path):
    path = tmp_path / "t5.csv"
    path.write_text(confusion_to_csv(FIXTURES["task5"].confusion()))
    code, out, _ = run(capsys, "metrics", "--cm", path, "--format", "text", "--out", tmp_path / "r.txt")
    assert code == 0 and "87 / 82.86%" in (tmp_path / "r.txt").read_text()


@pytest.mark.parametrize("text", ["predicted\\actual,a,b\na,1,0\n", "predicted\\actual,a,b\na,1\nb,0,1\n"])
def test_metrics_non_square_exit_2(capsys, tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    assert run(capsys, "metrics", "--cm", path)[0] == 2


def test_metrics_missing_file_exit_2(capsys, tmp_path):
    assert run(capsys, "metrics", "--cm", tmp_path / "absent.csv")[0] == 2


# -- verify ----------------------------------------------------------------------


def test_verify_shapes(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "shapes")
    assert code == 0 and "E13" in out


def test_verify_unknown_suite(capsys):
    assert run(capsys, "verify", "--suite", "everything")[0] == 2


def test_verify_failure_exit_1(capsys, monkeypatch):
    from cvrnet import verify

    monkeypatch.setattr(verify, "run_shapes_suite",
                        lambda: [verify.CheckOutcome("E13", False, "got (1, 2)", 0.0)])
    code, out, _ = run(capsys, "verify", "--suite", "shapes")
    assert code == 1 and "first failure: E13" in out


# -- train / evaluate / predict / foldavg ----------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_data):
    """Two identical deterministic one-epoch runs plus the plan they share."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CFG)
    plan = root / "plan.json"
    assert cli.main(["split", "--data", str(toy_data), "--seed", "0", "--out", str(plan)]) == 0
    runs = []
    for name in ("a", "b"):
        out = root / name
        argv = ["train", "--config", str(cfg), "--data", str(toy_data), "--plan", str(plan), "--fold", "0",
                "--seed", "0", "--deterministic", "--out", str(out)]
        assert cli.main(argv) == 0
        runs.append(out)
    return cfg, plan, runs


def test_train_outputs_and_determinism(trained):
    _, _, (a, b) = trained
    for name in ("train_report.jsonl", "best.ckpt", "config.resolved", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    manifest = json.loads((a / "manifest.json").read_text())
    assert {e["path"] for e in manifest["artifacts"]} == {"train_report.jsonl", "best.ckpt", "config.resolved"}
    record = json.loads((a / "train_report.jsonl").read_text().splitlines()[0])
    assert record["epoch"] == 1 and record["wall_time"] == 0.0
    assert "deterministic = true" in (a / "config.resolved").read_text()


def test_train_fold_out_of_range(capsys, trained, toy_data, tmp_path):
    cfg, plan, _ = trained
    code, _, err = run(capsys, "train", "--config", cfg, "--data", toy_data, "--plan", plan, "--fold", 7,
                       "--out", tmp_path / "x")
    assert code == 2 and "fold 7" in err


def test_train_numerical_abort_exit_3(capsys, trained, toy_data, tmp_path, monkeypatch):
    cfg, plan, _ = trained

    def explode(*args, **kwargs):
        raise NumericalError("non-finite loss nan at epoch 1", 1, [0], 1e-4)

    monkeypatch.setattr(cli, "fit", explode)
    code, _, err = run(capsys, "train", "--config", cfg, "--data", toy_data, "--plan", plan, "--out", tmp_path / "x")
    assert code == 3 and "numerical abort" in err


def test_evaluate_twice_identical(capsys, trained, toy_data, tmp_path):
    cfg, plan, (a, _) = trained
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        code, text, _ = run(capsys, "evaluate", "--model", a / "best.ckpt", "--config", cfg, "--data", toy_data,
                            "--plan", plan, "--fold", 0, "--out", out)
        assert code == 0 and "Confusion matrix" in text
        outs.append(out)
    for name in ("metrics.json", "confusion.csv", "report.txt", "predictions.csv", "manifest.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    rep = json.loads((outs[0] / "metrics.json").read_text())
    assert sum(map(sum, rep["confusion"])) == len(FoldPlan.load(plan).fold(0).test)


def test_evaluate_class_count_mismatch_exit_4(capsys, trained, toy_data, tmp_path):
    cfg, plan, _ = trained
    ckpt = tmp_path / "k3.ckpt"
    save_checkpoint(build(TOY_CONFIG.__class__(32, 32, 3, TOY_CONFIG.width_multiplier), 0), ckpt)
    code, _, err = run(capsys, "evaluate", "--model", ckpt, "--config", cfg, "--data", toy_data, "--plan", plan,
                       "--out", tmp_path / "e")
    assert code == 4 and "classes" in err


def test_evaluate_corrupt_checkpoint_exit_4(capsys, trained, toy_data, tmp_path):
    cfg, plan, _ = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, _ = run(capsys, "evaluate", "--model", bad, "--config", cfg, "--data", toy_data, "--plan", plan,
                     "--out", tmp_path / "e")
    assert code == 4


def test_evaluate_empty_test_set(capsys, trained, toy_data, tmp_path):
    cfg, plan, (a, _) = trained
    p = FoldPlan.load(plan)
    p.folds[0].train += p.folds[0].test
    p.folds[0].test = []
    empty = tmp_path / "empty.json"
    p.save(empty)
    code, _, err = run(capsys, "evaluate", "--model", a / "best.ckpt", "--config", cfg, "--data", toy_data,
                       "--plan", empty, "--out", tmp_path / "e")
    assert code == 2 and "empty test set" in err


def test_predict(capsys, trained, toy_data):
    _, _, (a, _) = trained
    images = sorted(str(p) for p in (toy_data / "dark").iterdir())[:2]
    code, out, _ = run(capsys, "predict", "--model", a / "best.ckpt", *images)
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 2
    probs = [float(v) for v in lines[0].split("\t")[2].split()]
    assert sum(probs) == pytest.approx(1.0, abs=1e-3)


def test_foldavg_table(capsys, tmp_path):
    paths = []
    for i in range(3):
        path = tmp_path / f"m{i}.json"
        path.write_text(json.dumps(json.loads(_fixture_report_json("task1"))))
        paths.append(path)
    code, out, _ = run(capsys, "foldavg", *paths, "--out", tmp_path / "avg.txt")
    lines = out.splitlines()
    assert code == 0
    assert lines[1].startswith("Fold-1") and lines[-1].startswith("Average")
    assert "0.998 ± 0.000" in lines[-1]
    assert (tmp_path / "avg.txt").read_text().rstrip() == out.rstrip()


def test_foldavg_rejects_non_report(capsys, tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{}")
    assert run(capsys, "foldavg", path)[0] == 2


def _fixture_report_json(task):
    from cvrnet.metrics import evaluate_confusion, report_to_json

    return report_to_json(evaluate_confusion(FIXTURES[task].confusion()))
