import json

import pytest
from PIL import Image

from cyclemod.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from cyclemod.config import format_config

from conftest import tiny_experiment


@pytest.fixture
def tiny_config_file(tmp_path):
    """Config file shrinking every section down to the 16px test setup."""
    path = tmp_path / "tiny.cfg"
    path.write_text(format_config(tiny_experiment(total_iters=2)))
    return path


def run_cli(*argv) -> int:
    return main(list(str(a) for a in argv))


def test_make_toy_writes_dataset(tmp_path):
    out = tmp_path / "data"
    code = run_cli(
        "make-toy", "--out", out, "--image-size", 16, "--train-count", 3, "--test-count", 2
    )
    assert code == EXIT_OK
    for split, count in (("trainA", 3), ("trainB", 3), ("testA", 2), ("testB", 2)):
        files = list((out / split).glob("*.png"))
        assert len(files) == count
        assert Image.open(files[0]).size == (16, 16)


def test_train_command_end_to_end(tiny_root, tiny_config_file, tmp_path, capsys):
    out = tmp_path / "run"
    code = run_cli("train", "--config", tiny_config_file, "--data", tiny_root, "--out", out)
    assert code == EXIT_OK
    assert (out / "checkpoint.ckpt").exists()
    assert (out / "metrics.jsonl").exists()
    assert (out / "config.cfg").exists()
    printed = capsys.readouterr().out
    assert "resolved configuration:" in printed
    assert "final checkpoint:" in printed


def test_unknown_override_key_is_config_error(tiny_root, tmp_path):
    code = run_cli(
        "train",
        "--set", "train.warp_speed=9",
        "--data", tiny_root,
        "--out", tmp_path / "run",
    )
    assert code == EXIT_CONFIG


def test_bad_override_value_is_config_error(tiny_root, tiny_config_file, tmp_path):
    code = run_cli(
        "train",
        "--config", tiny_config_file,
        "--set", "train.total_iters=soon",
        "--data", tiny_root,
        "--out", tmp_path / "run",
    )
    assert code == EXIT_CONFIG


def test_missing_config_file_is_config_error(tiny_root, tmp_path):
    code = run_cli(
        "train", "--config", tmp_path / "nope.cfg", "--data", tiny_root, "--out", tmp_path / "o"
    )
    assert code == EXIT_CONFIG


def test_missing_data_root_is_runtime_error(tiny_config_file, tmp_path):
    code = run_cli(
        "train", "--config", tiny_config_file, "--data", tmp_path / "void", "--out", tmp_path / "o"
    )
    assert code == EXIT_RUNTIME


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        run_cli("train", "--data")  # missing value and required --out
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli("launder")
    assert exc.value.code == 2


def test_translate_and_grid_and_evaluate(tiny_root, tiny_config_file, tmp_path):
    run_dir = tmp_path / "run"
    assert run_cli(
        "train", "--config", tiny_config_file, "--data", tiny_root, "--out", run_dir
    ) == EXIT_OK
    ckpt = run_dir / "checkpoint.ckpt"

    trans_dir = tmp_path / "translated"
    code = run_cli(
        "translate", "--ckpt", ckpt, "--input", tiny_root / "testA", "--out", trans_dir
    )
    assert code == EXIT_OK
    outputs = sorted(trans_dir.glob("*.png"))
    assert len(outputs) == 4
    assert Image.open(outputs[0]).size == (16, 16)

    # live weights give a different translation than the averaged default
    live_dir = tmp_path / "translated_live"
    assert run_cli(
        "translate", "--ckpt", ckpt, "--input", tiny_root / "testA",
        "--out", live_dir, "--no-ema",
    ) == EXIT_OK
    pair = (outputs[0], live_dir / outputs[0].name)
    assert pair[0].read_bytes() != pair[1].read_bytes()

    grid_path = tmp_path / "sheet.png"
    inputs = sorted((tiny_root / "testA").glob("*.png"))[:2]
    assert run_cli("grid", "--ckpt", ckpt, "--out", grid_path, *inputs) == EXIT_OK
    assert Image.open(grid_path).size == (32, 32)  # 2 columns x 2 rows of 16px

    report_path = tmp_path / "report.json"
    code = run_cli(
        "evaluate",
        "--config", tiny_config_file,
        "--translated", trans_dir,
        "--target", tiny_root / "testB",
        "--source", tiny_root / "testA",
        "--out", report_path,
    )
    assert code == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["protocol"] == "consistent"
    assert report["n_translated"] == 4


def test_pretrain_then_train_from_it(tiny_root, tiny_config_file, tmp_path):
    pre_dir = tmp_path / "pre"
    assert run_cli(
        "pretrain", "--config", tiny_config_file, "--data", tiny_root, "--out", pre_dir
    ) == EXIT_OK
    ckpt = pre_dir / "pretrained.ckpt"
    assert ckpt.exists()
    code = run_cli(
        "train",
        "--config", tiny_config_file,
        "--data", tiny_root,
        "--out", tmp_path / "run",
        "--pretrained", ckpt,
    )
    assert code == EXIT_OK


def test_resume_under_other_config_is_config_error(tiny_root, tiny_config_file, tmp_path):
    run_dir = tmp_path / "run"
    assert run_cli(
        "train", "--config", tiny_config_file, "--data", tiny_root, "--out", run_dir
    ) == EXIT_OK
    other = tmp_path / "other.cfg"
    other.write_text(format_config(tiny_experiment(total_iters=2, seed=8)))
    code = run_cli(
        "train",
        "--config", other,
        "--data", tiny_root,
        "--out", tmp_path / "resumed",
        "--resume", run_dir / "checkpoint.ckpt",
    )
    assert code == EXIT_CONFIG


def test_deterministic_mode_zeroes_seconds(tiny_root, tiny_config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("CYCLEMOD_DETERMINISTIC", "1")
    out_one = tmp_path / "one"
    out_two = tmp_path / "two"
    for out in (out_one, out_two):
        assert run_cli(
            "train", "--config", tiny_config_file, "--data", tiny_root, "--out", out
        ) == EXIT_OK
    m1 = (out_one / "metrics.jsonl").read_bytes()
    m2 = (out_two / "metrics.jsonl").read_bytes()
    assert m1 == m2
    assert all(json.loads(l)["seconds"] == 0.0 for l in m1.decode().splitlines())
