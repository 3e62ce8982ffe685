import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from treebp.cli import main
from treebp.models import Tree3Config, init_params
from treebp.training import load_checkpoint, save_checkpoint

from test_datasets import write_mnist_dir


@pytest.fixture
def mnist_dir(tmp_path):
    write_mnist_dir(tmp_path / "data" / "mnist", n_train=40, n_test=20)
    return tmp_path / "data"


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_routes(capsys):
    assert main(["routes"]) == 0
    assert main(["routes", "--arch", "lenet5"]) == 0
    assert main(["routes", "--instances", "--k", "6", "--m", "16"]) == 0
    assert main(["routes", "--instances", "--k", "15", "--m", "80"]) == 0
    assert main(["routes", "--arch", "lenet5", "--instances", "--post-pool"]) == 0
    out = [int(v) for v in capsys.readouterr().out.split()]
    assert out == [1, 1008000, 5644800, 25 * 3 * 15 * 28 * 28 * 80, 88200]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "treebp", "routes"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "1"


def test_help_lists_plans_and_update_rule(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for name in ("tree3-mnist", "lenet5-offline", "tentree-k15m80-offline", "tree3-k6m16-desk"):
        assert name in text
    assert "eta=0.075 mu=0.965 alpha=5e-05" in text
    assert "v = mu * v + g~" in text


def test_usage_errors(capsys, tmp_path):
    assert main(["train", "--data-dir", str(tmp_path)]) == 2
    assert main(["train", "--plan", "tree3-mnist", "--plan-file", "x.json", "--data-dir", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    assert main(["train", "--plan", "tree4", "--data-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "tree3-mnist" in err


def test_missing_data_is_an_error(tmp_path, capsys):
    assert main(["train", "--plan", "tree3-mnist", "--data-dir", str(tmp_path)]) == 1
    assert "missing" in capsys.readouterr().err


def test_gradcheck_and_fault(capsys):
    assert main(["gradcheck", "--instances", "20"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("pruned==reference: PASS")
    assert main(["gradcheck", "--instances", "20", "--inject-fault"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_train_writes_outputs(mnist_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--plan", "tree3-mnist", "--epochs", "2", "--data-dir", str(mnist_dir),
                 "--out", str(out), "--seed", "4"]) == 0
    rows = read_csv(out / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["runs"][0]["seed"] == 4
    assert 0 <= summary["mean"] <= 1
    params, config = load_checkpoint(out / "checkpoint.bin")
    assert config == Tree3Config(K=15, M=16, geometry="mnist")
    plan = json.loads((out / "plan.json").read_text())
    assert plan["epochs"] == 2 and plan["seed"] == 4

    # the saved plan replays to the identical checkpoint
    again = tmp_path / "again"
    assert main(["train", "--plan-file", str(out / "plan.json"), "--data-dir", str(mnist_dir),
                 "--out", str(again)]) == 0
    assert (again / "checkpoint.bin").read_bytes() == (out / "checkpoint.bin").read_bytes()

    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data-dir", str(mnist_dir),
                 "--out", str(out)]) == 0
    ev = json.loads((out / "eval.json").read_text())
    assert ev["examples"] == 20
    assert ev["accuracy"] == pytest.approx(float(rows[-1]["test_accuracy"]))


def test_train_replicates(mnist_dir, tmp_path):
    out = tmp_path / "rep"
    assert main(["train", "--plan", "tree3-mnist", "--epochs", "1", "--replicates", "3",
                 "--data-dir", str(mnist_dir), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n"] == 3
    accs = [r["accuracy"] for r in summary["runs"]]
    assert summary["mean"] == pytest.approx(np.mean(accs))
    assert summary["std"] == pytest.approx(np.std(accs, ddof=1))


def test_eval_config_mismatch(tmp_path, capsys):
    config = Tree3Config(K=6, M=16)
    save_checkpoint(init_params(config, 0), config, tmp_path / "c.bin")
    assert main(["eval", "--checkpoint", str(tmp_path / "c.bin"), "--k", "15", "--synthetic", "5"]) == 1
    assert "ConfigMismatchError" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "c.bin"), "--k", "6", "--synthetic", "5"]) == 0


def test_sparsity_csv(tmp_path):
    assert main(["sparsity", "--k", "2", "--m", "2", "--synthetic", "40", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sparsity.csv")
    assert [r["layer"] for r in rows] == ["conv", "tree", "fc"]
    for r in rows:
        assert 0 <= float(r["fraction_zero"]) <= 1
        assert float(r["std"]) >= 0
        assert int(r["samples"]) == 10 and int(r["examples"]) == 40


def test_gradhist_csv(tmp_path):
    assert main(["gradhist", "--k", "2", "--m", "2", "--synthetic", "30", "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "gradhist_conv.json").read_text())
    assert len(meta) == 4
    for name, m in meta.items():
        rows = read_csv(tmp_path / name)
        if m is None:
            assert rows == []
            continue
        assert list(rows[0]) == ["bin_low", "bin_high", "count", "cum_fraction", "delta0"]
        assert len(rows) == 1000
        lows = [float(r["bin_low"]) for r in rows]
        assert all(a < b for a, b in zip(lows, lows[1:]))
        assert sum(int(r["count"]) for r in rows) == m["total"]
        assert float(rows[-1]["cum_fraction"]) == pytest.approx(1.0)
        (flagged,) = [r for r in rows if r["delta0"] == "1"]
        assert float(flagged["bin_high"]) == pytest.approx(m["delta0"])
        assert float(flagged["cum_fraction"]) == pytest.approx(m["delta0_mass"])
