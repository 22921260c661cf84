import subprocess
import sys

import pytest

from jetflow.cli import main
from jetflow.ppm import read_ppm

from conftest import tiny_config


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "train.jfds"), "--count", "64", "--size", "8"]) == 0
    assert main(["synth", "--out", str(root / "test.jfds"), "--count", "32", "--size", "8", "--seed", "1"]) == 0
    cfg = tiny_config(data=str(root / "train.jfds"), steps=6, checkpoint_every=3)
    cfg.save(root / "run.cfg")
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "out")]) == 0
    return root


def test_train_outputs(run_dir):
    names = sorted(p.name for p in (run_dir / "out").iterdir())
    assert names == ["ckpt_000003.jfck", "ckpt_000006.jfck", "config.txt", "final.jfck", "metrics.csv"]
    assert len((run_dir / "out" / "metrics.csv").read_text().splitlines()) == 7


def test_train_refuses_to_overwrite(run_dir, capsys):
    assert main(["train", "--config", str(run_dir / "run.cfg"), "--out", str(run_dir / "out")]) == 2
    assert "not empty" in capsys.readouterr().err


def test_missing_dataset_is_usage_error(run_dir, capsys):
    code = main(["train", "--config", str(run_dir / "run.cfg"), "--out", str(run_dir / "o2"),
                 "--set", "data=/nonexistent.jfds"])
    assert code == 2 and "dataset not found" in capsys.readouterr().err


def test_set_rejects_unknown_keys(run_dir):
    assert main(["train", "--config", str(run_dir / "run.cfg"), "--out", str(run_dir / "o3"),
                 "--set", "bogus=1"]) == 2


def test_resume_continues(run_dir, tmp_path):
    out = tmp_path / "r"
    code = main(["train", "--resume", str(run_dir / "out" / "ckpt_000003.jfck"), "--out", str(out)])
    assert code == 0
    a = (run_dir / "out" / "final.jfck").read_bytes()
    b = (out / "final.jfck").read_bytes()
    assert a == b


def _eval(capsys, *args):
    assert main(["eval", *args]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("bpd=")
    return line


def test_eval(run_dir, capsys):
    ck, data = str(run_dir / "out" / "final.jfck"), str(run_dir / "test.jfds")
    assert _eval(capsys, "--uniform-reference", "--data", data) == "bpd=8.000000"
    a = _eval(capsys, "--ckpt", ck, "--data", data)
    assert a == _eval(capsys, "--ckpt", ck, "--data", data)
    assert a != _eval(capsys, "--ckpt", ck, "--data", data, "--label-mode", "mismatched")


def test_eval_rejects_mismatched_dataset(run_dir, tmp_path):
    main(["synth", "--out", str(tmp_path / "big.jfds"), "--count", "4", "--size", "16"])
    assert main(["eval", "--ckpt", str(run_dir / "out" / "final.jfck"), "--data", str(tmp_path / "big.jfds")]) == 2


def test_sample_writes_ppms(run_dir, tmp_path):
    ck = str(run_dir / "out" / "final.jfck")
    assert main(["sample", "--ckpt", ck, "--n", "4", "--class", "1", "--out", str(tmp_path / "a")]) == 0
    files = sorted((tmp_path / "a").glob("*.ppm"))
    assert len(files) == 4 and all(read_ppm(f).shape == (8, 8, 3) for f in files)
    assert len((tmp_path / "a" / "index.txt").read_text().splitlines()) == 4
    main(["sample", "--ckpt", ck, "--n", "4", "--class", "1", "--out", str(tmp_path / "b")])
    assert all(f.read_bytes() == (tmp_path / "b" / f.name).read_bytes() for f in files)
    # guidance 0 is plain sampling
    main(["sample", "--ckpt", ck, "--n", "2", "--class", "1", "--cfg", "0", "--out", str(tmp_path / "c")])
    main(["sample", "--ckpt", ck, "--n", "2", "--out", str(tmp_path / "d"), "--class", "1", "--cfg", "0.0"])
    assert (tmp_path / "c" / "sample_0000.ppm").read_bytes() == (tmp_path / "d" / "sample_0000.ppm").read_bytes()


def test_sample_errors_and_resample(run_dir, tmp_path):
    ck = str(run_dir / "out" / "final.jfck")
    assert main(["sample", "--ckpt", ck, "--class", "99", "--out", str(tmp_path / "x")]) == 2
    assert main(["sample", "--ckpt", ck, "--prompt", "hello", "--out", str(tmp_path / "x")]) == 2
    main(["sample", "--ckpt", ck, "--n", "1", "--out", str(tmp_path / "src")])
    src = tmp_path / "src" / "sample_0000.ppm"
    assert main(["sample", "--ckpt", ck, "--n", "2", "--resample-gaussian-latents", str(src),
                 "--out", str(tmp_path / "rs")]) == 0
    assert len(list((tmp_path / "rs").glob("*.ppm"))) == 2


def test_default_guidance_is_four():
    from jetflow.cli import build_parser

    args = build_parser().parse_args(["sample", "--ckpt", "x"])
    assert args.cfg == 4.0


def test_check_suite_exit_code(capsys):
    assert main(["check", "--suite", "gmm"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "jetflow.cli", "eval", "--uniform-reference", "--data", "/nope"],
                         capture_output=True, text=True)
    assert res.returncode == 2
