import json

import numpy as np
import pytest

from latent_soc.cli import BENCH_HEADER, EXIT_DATA, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.cfg").write_text("n = 4\nlength = 24\nn_series = 40\nseed = 3\n")
    (root / "train.cfg").write_text("epochs = 1\nwarmup = 0\nbatch = 8\nT = 16\ngamma = 0.5\n"
                                    "n = 4\nd = 4\nblocks = 1\nheads = 1\nbases = 2\n")
    assert main(["gen", "--config", str(root / "gen.cfg"), "--out", str(root / "gen")]) == EXIT_OK
    assert main(["pretrain", "--config", str(root / "train.cfg"), "--data", str(root / "gen" / "data.lsds"),
                 "--out", str(root / "pre"), "--quiet"]) == EXIT_OK
    return root


def test_gen_outputs(workspace):
    manifest = json.loads((workspace / "gen" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["summary"]["series"] == 40
    assert np.load(workspace / "gen" / "latents.npy").shape == (40, 24, 4)


def test_pretrain_outputs(workspace):
    assert (workspace / "pre" / "checkpoint.bin").exists()
    assert (workspace / "pre" / "metrics.csv").read_text().startswith("epoch,energy,recon,reg,total,val_mse,lr")
    manifest = json.loads((workspace / "pre" / "manifest.json").read_text())
    assert manifest["subcommand"] == "pretrain" and len(manifest["config_hash"]) == 16


def test_probe_and_eval(workspace, capsys):
    ckpt, data = str(workspace / "pre" / "checkpoint.bin"), str(workspace / "gen" / "data.lsds")
    assert main(["probe", "--checkpoint", ckpt, "--data", data, "--task", "cls", "--out",
                 str(workspace / "probe")]) == EXIT_OK
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= record["acc"] <= 1.0
    assert (workspace / "probe" / "probe.jsonl").read_text().count("\n") == 1
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--out", str(workspace / "eval")]) == EXIT_OK
    assert "recon_mse" in json.loads((workspace / "eval" / "eval.json").read_text())


def test_finetune(workspace):
    ckpt, data = str(workspace / "pre" / "checkpoint.bin"), str(workspace / "gen" / "data.lsds")
    out = workspace / "ft"
    assert main(["finetune", "--checkpoint", ckpt, "--data", data, "--task", "reg", "--epochs", "1",
                 "--out", str(out)]) == EXIT_OK
    assert (out / "finetuned.bin").exists()
    assert set(json.loads((out / "finetune.jsonl").read_text())["test"]) == {"mse", "rho"}


def test_bench_scan(tmp_path, capsys):
    assert main(["bench-scan", "--k", "512", "--d", "2", "--workers", "2", "--repeats", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    captured = capsys.readouterr()
    lines = (tmp_path / "bench_scan.csv").read_text().splitlines()
    assert lines[0] == BENCH_HEADER and lines[1].startswith("512,2,")
    assert "speedup" in captured.err


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["probe", "--out", str(tmp_path)])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == EXIT_USAGE
    (tmp_path / "bad.cfg").write_text("gamma = 2\n")
    assert main(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--data", "x", "--out", str(tmp_path)]) \
        == EXIT_USAGE


def test_data_errors_exit_two(tmp_path, workspace):
    (tmp_path / "junk.lsds").write_bytes(b"junk")
    assert main(["pretrain", "--data", str(tmp_path / "junk.lsds"), "--out", str(tmp_path / "a")]) == EXIT_DATA
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.lsds"),
                 "--data", str(workspace / "gen" / "data.lsds"), "--out", str(tmp_path / "b")]) == EXIT_DATA
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["summary"]["exit_code"] == EXIT_DATA


def test_channel_mismatch_is_data_error(tmp_path, workspace):
    (tmp_path / "g.cfg").write_text("n = 5\nlength = 24\nn_series = 20\n")
    main(["gen", "--config", str(tmp_path / "g.cfg"), "--out", str(tmp_path / "g")])
    assert main(["eval", "--checkpoint", str(workspace / "pre" / "checkpoint.bin"),
                 "--data", str(tmp_path / "g" / "data.lsds"), "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_pretrain_rerun_is_bitwise_identical(workspace):
    out = workspace / "pre_again"
    assert main(["pretrain", "--config", str(workspace / "train.cfg"), "--data", str(workspace / "gen" / "data.lsds"),
                 "--out", str(out), "--quiet"]) == EXIT_OK
    assert (out / "metrics.csv").read_bytes() == (workspace / "pre" / "metrics.csv").read_bytes()
    assert (out / "checkpoint.bin").read_bytes() == (workspace / "pre" / "checkpoint.bin").read_bytes()


def test_verify_passes(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out
