"""Command-line interface: commands, outputs, exit codes, diagnostics."""

import subprocess
import sys

import numpy as np
import pytest
import yaml

from reslink.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main
from reslink.gradcheck import check_names


def _write_config(path, **overrides):
    raw = {
        "seed": 5,
        "model": {"input_h": 16, "input_w": 16, "input_c": 1,
                  "stem_filters": 4, "stage_filters": [4],
                  "area_h": 2, "area_w": 2},
        "optim": {"epochs": 1, "batch_size": 8},
        "data": {"synthetic": {"per_class": 12}},
    }
    raw.update(overrides)
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One small end-to-end training run shared by the read-only CLI tests."""
    base = tmp_path_factory.mktemp("cli_run")
    config = _write_config(base / "run.yaml")
    out = base / "out"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    return {"config": config, "out": out, "base": base}


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_exactly_two_class_directories(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["synth", "--out", str(out), "--per-class", "10",
                 "--height", "16", "--width", "16", "--seed", "3"])
    assert code == EXIT_OK
    assert "wrote 20 images" in capsys.readouterr().out
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["clean", "lesion"]
    files = sorted(out.rglob("*.png"))
    assert len(files) == 20


def test_synth_same_seed_is_byte_identical(tmp_path):
    args = ["--per-class", "4", "--height", "12", "--width", "12", "--seed", "9"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == EXIT_OK
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == EXIT_OK
    a_files = sorted((tmp_path / "a").rglob("*.png"))
    b_files = sorted((tmp_path / "b").rglob("*.png"))
    assert len(a_files) == len(b_files) == 8
    for fa, fb in zip(a_files, b_files):
        assert fa.relative_to(tmp_path / "a") == fb.relative_to(tmp_path / "b")
        assert fa.read_bytes() == fb.read_bytes()


def test_synth_files_round_trip_within_quantisation(tmp_path):
    from reslink.data import load_image, make_synthetic

    out = tmp_path / "data"
    assert main(["synth", "--out", str(out), "--per-class", "3",
                 "--height", "16", "--width", "16", "--seed", "21"]) == EXIT_OK
    originals = make_synthetic(3, 16, 16, seed=21)
    by_class = {"clean": [], "lesion": []}
    for img, label in originals.samples:
        by_class[originals.class_names[label]].append(img)
    for name, imgs in by_class.items():
        for i, path in enumerate(sorted((out / name).iterdir())):
            decoded = load_image(path, channels=1)
            assert np.abs(decoded - imgs[i]).max() <= 1.0 / 255.0


# ---------------------------------------------------------------------------
# train


def test_train_writes_all_artifacts(run_dir):
    produced = {p.name for p in run_dir["out"].iterdir()}
    assert produced == {"metrics.csv", "report.csv", "report.txt",
                        "model.rslk", "shapes.txt", "curves.svg", "config.yaml"}
    metrics = (run_dir["out"] / "metrics.csv").read_text()
    assert metrics.startswith("epoch,train_loss,train_acc,val_loss,val_acc\n")
    assert len(metrics.splitlines()) == 2  # header + 1 epoch
    svg = (run_dir["out"] / "curves.svg").read_text()
    assert svg.lstrip().startswith("<?xml")
    shapes = (run_dir["out"] / "shapes.txt").read_text()
    assert shapes.splitlines()[0] == "input: Nx16x16x1"
    assert shapes.endswith("head: Nx1\n")


def test_train_same_config_twice_identical_metrics(tmp_path):
    config = _write_config(tmp_path / "run.yaml")
    for sub in ("r1", "r2"):
        assert main(["train", "--config", str(config),
                     "--out", str(tmp_path / sub)]) == EXIT_OK
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == \
        (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert (tmp_path / "r1" / "model.rslk").read_bytes() == \
        (tmp_path / "r2" / "model.rslk").read_bytes()


def test_train_missing_dataset_root_exits_2_naming_path(tmp_path, capsys):
    config = _write_config(tmp_path / "run.yaml",
                           data={"root": "no_such_dir"})
    code = main(["train", "--config", str(config), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert err.startswith("reslink: error:")
    assert "no_such_dir" in err
    assert len(err.strip().splitlines()) == 1


def test_train_requires_an_output_directory(tmp_path, capsys):
    config = _write_config(tmp_path / "run.yaml")
    assert main(["train", "--config", str(config)]) == EXIT_CONFIG
    assert "output directory" in capsys.readouterr().err


def test_train_seed_override_changes_the_run(tmp_path):
    config = _write_config(tmp_path / "run.yaml")
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "a"),
                 "--seed", "5"]) == EXIT_OK
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "b"),
                 "--seed", "11"]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != \
        (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_prints_test_accuracy(tmp_path, capsys):
    config = _write_config(tmp_path / "run.yaml")
    assert main(["train", "--config", str(config),
                 "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "test_accuracy=" in out
    assert "outputs written to" in out


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_reproduces_report_csv_exactly(run_dir, capsys):
    code = main(["evaluate", str(run_dir["out"] / "model.rslk"),
                 "--config", str(run_dir["config"])])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert stdout.encode() == (run_dir["out"] / "report.csv").read_bytes()


def test_evaluate_directory_dataset(run_dir, tmp_path, capsys):
    data = tmp_path / "eval_data"
    assert main(["synth", "--out", str(data), "--per-class", "5",
                 "--height", "16", "--width", "16", "--seed", "77"]) == EXIT_OK
    capsys.readouterr()
    code = main(["evaluate", str(run_dir["out"] / "model.rslk"),
                 "--data", str(data)])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("name,precision,recall,f1,support\n")
    assert "accuracy," in out


def test_evaluate_class_mismatch_exits_2(run_dir, tmp_path, capsys):
    from PIL import Image

    for name in ("cats", "dogs"):
        d = tmp_path / "wrong" / name
        d.mkdir(parents=True)
        Image.new("L", (16, 16)).save(d / "x.png")
    code = main(["evaluate", str(run_dir["out"] / "model.rslk"),
                 "--data", str(tmp_path / "wrong")])
    assert code == EXIT_CONFIG
    assert "do not match checkpoint" in capsys.readouterr().err


def test_evaluate_corrupt_checkpoint_exits_3(run_dir, tmp_path, capsys):
    blob = bytearray((run_dir["out"] / "model.rslk").read_bytes())
    blob[:4] = b"JUNK"
    bad = tmp_path / "bad.rslk"
    bad.write_bytes(bytes(blob))
    code = main(["evaluate", str(bad), "--config", str(run_dir["config"])])
    assert code == EXIT_CHECKPOINT
    assert "reslink: error:" in capsys.readouterr().err


def test_evaluate_missing_checkpoint_exits_2(run_dir, capsys):
    code = main(["evaluate", str(run_dir["base"] / "absent.rslk"),
                 "--config", str(run_dir["config"])])
    assert code == EXIT_CONFIG


def test_evaluate_requires_exactly_one_source(run_dir):
    with pytest.raises(SystemExit):
        main(["evaluate", str(run_dir["out"] / "model.rslk")])


# ---------------------------------------------------------------------------
# predict


def test_predict_line_format_and_probability_range(run_dir, tmp_path, capsys):
    data = tmp_path / "imgs"
    assert main(["synth", "--out", str(data), "--per-class", "2",
                 "--height", "16", "--width", "16", "--seed", "13"]) == EXIT_OK
    capsys.readouterr()
    images = sorted(str(p) for p in data.rglob("*.png"))
    code = main(["predict", str(run_dir["out"] / "model.rslk"), *images])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == len(images)
    for line, path in zip(lines, images):
        got_path, name, prob = line.rsplit(",", 2)
        assert got_path == path
        assert name in ("clean", "lesion")
        assert 0.0 < float(prob) < 1.0


def test_predict_missing_image_exits_2(run_dir, capsys):
    code = main(["predict", str(run_dir["out"] / "model.rslk"),
                 str(run_dir["base"] / "ghost.png")])
    assert code == EXIT_CONFIG
    assert "ghost.png" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_reports_one_line_per_layer(capsys):
    code = main(["gradcheck", "--seeds", "1"])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == len(check_names())
    for line, name in zip(lines, check_names()):
        assert line.startswith(f"{name}: max_rel_error=")
        assert line.endswith(" ok")


def test_gradcheck_corrupted_backward_exits_1_naming_layer(capsys):
    code = main(["gradcheck", "--seeds", "1", "--corrupt", "conv2d"])
    assert code == EXIT_VERIFY
    captured = capsys.readouterr()
    assert "conv2d: " in captured.out
    assert "FAIL" in captured.out
    assert "gradient check failed for: conv2d" in captured.err


def test_gradcheck_unknown_corrupt_layer_exits_2(capsys):
    code = main(["gradcheck", "--corrupt", "warp_drive"])
    assert code == EXIT_CONFIG
    assert "warp_drive" in capsys.readouterr().err


def test_gradcheck_accepts_config_seed(tmp_path, capsys):
    config = _write_config(tmp_path / "run.yaml")
    code = main(["gradcheck", "--seeds", "1", "--config", str(config),
                 "--dtype", "f64"])
    assert code == EXIT_OK


# ---------------------------------------------------------------------------
# global flags and entry point


def test_threads_must_be_positive(capsys):
    assert main(["gradcheck", "--threads", "0"]) == EXIT_CONFIG
    assert "--threads" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["decompile"])
    assert exc.value.code == 2


def test_module_entry_point_subprocess(tmp_path):
    out = tmp_path / "data"
    proc = subprocess.run(
        [sys.executable, "-m", "reslink", "synth", "--out", str(out),
         "--per-class", "2", "--height", "8", "--width", "8",
         "--seed", "1", "--threads", "1"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    assert "wrote 4 images" in proc.stdout
    assert len(list(out.rglob("*.png"))) == 4
