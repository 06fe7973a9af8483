import csv
import json

import numpy as np
import pytest

from qcfs_yolo.cli import CONFIG_NAME, main, read_config
from qcfs_yolo.container import load_network

COMMANDS = ["gen-data", "train", "eval", "convert", "simulate", "analyze-error", "surgery"]
SMALL = ["--train-n", "8", "--val-n", "4", "--img-size", "32", "--epochs", "1", "--batch-size", "4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), *SMALL, "--epochs", "2"]) == 0
    return out


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag_is_usage_error_and_writes_nothing(tmp_path, capsys):
    out = tmp_path / "never"
    with pytest.raises(SystemExit) as info:
        main(["train", "--out", str(out), "--bogus", "1"])
    assert info.value.code == 2
    assert not out.exists()
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["train", "--epochs", "0"], ["analyze-error", "--T", "0,4"], ["analyze-error", "--z-range", "1"], ["convert", "--checkpoint", "x", "--plan", "middle"]])
def test_range_errors_exit_two(argv, tmp_path):
    with pytest.raises(SystemExit) as info:
        main([*argv, "--out", str(tmp_path / "o")])
    assert info.value.code == 2


def test_missing_checkpoint_exits_one(tmp_path):
    for cmd in ("eval", "convert", "simulate", "surgery"):
        assert main([cmd, "--checkpoint", str(tmp_path / "none.qnet"), "--out", str(tmp_path / cmd)]) == 1


def test_train_outputs(trained):
    assert {p.name for p in trained.iterdir()} >= {"checkpoint.qnet", "curves.csv", CONFIG_NAME}
    rows = list(csv.DictReader(open(trained / "curves.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    net, meta = load_network(trained / "checkpoint.qnet")
    assert meta["train_config"]["epochs"] == 2 and net.input_shape == (3, 32, 32)


def test_config_replay_is_byte_identical(trained, tmp_path):
    assert main(["train", "--config", str(trained / CONFIG_NAME), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "curves.csv").read_bytes() == (trained / "curves.csv").read_bytes()
    assert (tmp_path / "checkpoint.qnet").read_bytes() == (trained / "checkpoint.qnet").read_bytes()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nepochs = 3\ntrain_n = 8\n--val-n = 4\nimg-size = 32\ncosine = false\n")
    assert read_config(cfg)[0] == ("epochs", "3")
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(out)]) == 0
    assert len((out / "curves.csv").read_text().splitlines()) == 2
    echoed = dict(read_config(out / CONFIG_NAME))
    assert echoed["epochs"] == "1" and echoed["cosine"] == "false" and echoed["train-n"] == "8"


def test_unknown_config_key_exits_two(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp = 9\n")
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert info.value.code == 2


def test_eval_convert_simulate_pipeline(trained, tmp_path):
    ck = str(trained / "checkpoint.qnet")
    common = ["--val-n", "4", "--img-size", "32"]
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e"), *common]) == 0
    files = {p.name for p in (tmp_path / "e").iterdir()}
    assert files >= {"metrics.json", "metrics.csv", "precision_curve.csv", "recall_curve.csv", "f1_curve.csv", "pr_curve.csv"}

    assert main(["convert", "--checkpoint", ck, "--plan", "last-only", "--out", str(tmp_path / "c")]) == 0
    snn, meta = load_network(tmp_path / "c" / "converted.qnet")
    assert meta["conversion"]["plan"] == "last-only"
    assert [l.activation_kind for l in snn.activation_layers()][-1] == "if_neuron"

    conv = str(tmp_path / "c" / "converted.qnet")
    assert main(["simulate", "--checkpoint", conv, "--T", "4", "--out", str(tmp_path / "s"), *common]) == 0
    stats = json.loads((tmp_path / "s" / "spike_stats.json").read_text())
    (name, st), = stats.items()
    assert 0 <= st["spikes"] <= st["neurons"] * st["T"]
    assert json.loads((tmp_path / "s" / "metrics.json").read_text())["T"] == 4

    # the converted net has no QCFS left at the last position
    assert main(["convert", "--checkpoint", conv, "--plan", "last-only", "--out", str(tmp_path / "c2")]) == 1
    assert main(["eval", "--checkpoint", conv, "--out", str(tmp_path / "e2"), *common]) == 1


def test_surgery_command(trained, tmp_path):
    ck = str(trained / "checkpoint.qnet")
    assert main(["surgery", "--checkpoint", ck, "--T", "1,4", "--val-n", "4", "--img-size", "32", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "surgery.csv")))
    assert len(rows) == 8


def test_analyze_error_grid(tmp_path):
    out = tmp_path / "a"
    argv = ["analyze-error", "--T", "4,8,16", "--L", "4,8,16", "--phi", "0.5", "--n", "1000000", "--seed", "1", "--out", str(out)]
    assert main(argv) == 0
    rows = list(csv.DictReader(open(out / "conversion_error.csv")))
    assert len(rows) == 9
    for r in rows:
        assert abs(float(r["mean_err"])) <= 4 * float(r["std_err"]) / np.sqrt(int(r["n"]))
        if r["T"] == r["L"]:
            assert float(r["max_err"]) == 0.0
    first = (out / "conversion_error.csv").read_bytes()
    assert main(argv[:-1] + [str(tmp_path / "b"), "--threads", "2"]) == 0
    assert (tmp_path / "b" / "conversion_error.csv").read_bytes() == first


def test_gen_data_then_train_on_yolo_folder(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--train-n", "6", "--val-n", "3", "--test-n", "2", "--img-size", "32", "--out", str(data)]) == 0
    assert len(list((data / "images" / "train").glob("*.png"))) == 6
    assert len(list((data / "labels" / "test").glob("*.txt"))) == 2
    out = tmp_path / "t"
    assert main(["train", "--data", str(data), "--img-size", "32", "--epochs", "1", "--activation", "relu", "--out", str(out)]) == 0
    assert main(["eval", "--data", str(data), "--split", "test", "--img-size", "32",
                 "--checkpoint", str(out / "checkpoint.qnet"), "--out", str(tmp_path / "e")]) == 0


def test_bad_dataset_exits_one(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--epochs", "1", "--out", str(tmp_path / "o")]) == 1
