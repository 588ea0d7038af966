import json

import numpy as np
import pytest

from fgnn.cli import EXIT_IO, EXIT_MISMATCH, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main, sha256
from fgnn.learn import build_arch, stack_params
from fgnn.layers import load_stack
from fgnn.maxprod import run_max_product
from fgnn.synth import feature_dims, read_dataset


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen", "--dataset", "1", "--seed", "0", "--train", "12", "--val", "0", "--test", "4",
                 "--length", "10", "--window", "4", "--budget", "2", "--out", "d"]) == EXIT_OK
    return tmp_path


def lines(path):
    return [json.loads(x) for x in open(path)]


def test_gen_writes_header_and_instances(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    argv = ["gen", "--dataset", "1", "--seed", "0", "--train", "2", "--length", "30", "--window", "8",
            "--budget", "5", "--out", "d"]
    assert main(argv) == EXIT_OK
    rows = lines("d/train.jsonl")
    assert len(rows) == 3 and rows[0]["count"] == 2 and rows[0]["split"] == "train"
    digest = sha256("d/train.jsonl")
    assert main(argv) == EXIT_OK and sha256("d/train.jsonl") == digest
    man = json.load(open("d/manifest.json"))
    assert man["command"] == "gen" and man["outputs"]["d/train.jsonl"] == digest


@pytest.mark.parametrize("argv", [
    ["gen", "--dataset", "1", "--window", "8", "--length", "4", "--train", "1", "--out", "x"],
    ["gen", "--dataset", "4", "--out", "x"],
    ["solve", "--method", "annealing", "--in", "a", "--out", "b"],
    ["train", "--data", "a", "--out", "b", "--lr", "-1"],
    [],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_missing_file_is_io_error(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["solve", "--method", "dp", "--in", "nope.jsonl", "--out", "o"]) == EXIT_IO


def test_dp_recovers_labels(work):
    assert main(["solve", "--method", "dp", "--in", "d/test.jsonl", "--out", "dp.jsonl"]) == EXIT_OK
    summary = json.load(open("dp.jsonl.summary.json"))
    assert summary["agreement_mean"] == 1.0 and summary["instances"] == 4


def test_emulator_matches_max_product(work):
    assert main(["solve", "--method", "maxprod", "--iters", "3", "--in", "d/test.jsonl", "--out", "m"]) == 0
    assert main(["solve", "--method", "fgnn-exact", "--iters", "3", "--in", "d/test.jsonl", "--out", "e"]) == 0
    _, insts = read_dataset("d/test.jsonl")
    m, e = lines("m"), lines("e")
    assert [r["prediction"] for r in m] == [r["prediction"] for r in e]
    assert m[0]["prediction"] == list(run_max_product(insts[0].graph, 3)[1])


def test_solver_errors_are_recorded(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    main(["gen", "--dataset", "1", "--test", "2", "--length", "30", "--window", "4", "--budget", "2",
          "--out", "d"])
    assert main(["solve", "--method", "brute", "--in", "d/test.jsonl", "--out", "b"]) == EXIT_SOLVER
    assert all("CapacityError" in r["error"] for r in lines("b"))
    assert json.load(open("b.summary.json"))["errors"] == 2


def test_train_zero_epochs_is_initialisation(work):
    assert main(["train", "--data", "d/train.jsonl", "--epochs", "0", "--seed", "3", "--out", "p0"]) == 0
    init = build_arch("desk", feature_dims(1, 4), seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(stack_params(init), stack_params(load_stack("p0"))))
    assert open("p0.log.jsonl").read() == ""
    flags = json.load(open("p0.manifest.json"))["flags"]
    assert flags["lr"] == 3e-3 and flags["decay"] == 0.98


def test_train_then_eval(work, capsys):
    assert main(["train", "--data", "d/train.jsonl", "--epochs", "30", "--lr", "0.01", "--out", "p"]) == 0
    assert main(["train", "--data", "d/train.jsonl", "--epochs", "0", "--out", "p0"]) == 0
    capsys.readouterr()
    assert main(["eval", "--params", "p", "--data", "d/train.jsonl", "--out", "ev"]) == 0
    trained = float(capsys.readouterr().out.split()[1])
    assert main(["eval", "--params", "p0", "--data", "d/train.jsonl"]) == 0
    init = float(capsys.readouterr().out.split()[1])
    assert trained >= init
    assert len(lines("p.log.jsonl")) == 30 and len(lines("ev")) == 12


def test_replay_detects_changes(work):
    assert main(["solve", "--method", "dp", "--in", "d/test.jsonl", "--out", "s"]) == 0
    assert main(["replay", "s.manifest.json"]) == EXIT_OK
    with open("s", "a") as fh:
        fh.write("\n")
    # the rerun rewrites the output, so tampering with it is repaired
    assert main(["replay", "s.manifest.json"]) == EXIT_OK
    with open("d/test.jsonl", "a") as fh:
        fh.write("\n")
    assert main(["replay", "s.manifest.json"]) == EXIT_MISMATCH
    assert main(["replay", "d/test.jsonl"]) == EXIT_IO
