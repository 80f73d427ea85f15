import os

import numpy as np
import pytest
import yaml

from flowfit import __version__
from flowfit.cli import ConfigError, load_config, main
from flowfit.evaluation import read_report


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset plus a 3-step baseline checkpoint, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data_out = root / "gen"
    rc = main(["synth-gen", "--out", str(data_out),
               "--set", "synth.num_sequences=2",
               "--set", "synth.frames_per_sequence=8",
               "--set", "synth.labeled_fraction=0.5",
               "--seed", "7"])
    assert rc == 0
    dataset = data_out / "dataset"

    pre_out = root / "pretrain"
    rc = main(["pretrain", "--out", str(pre_out),
               "--set", f"dataset={dataset}",
               "--set", "train.steps=3",
               "--set", "train.batch_size=4",
               "--seed", "7"])
    assert rc == 0
    return {"root": root, "dataset": dataset,
            "checkpoint": pre_out / "checkpoint.ckpt"}


def test_load_config_layering(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  steps: 10\n  learning_rate: 0.001\n")
    cfg = load_config(str(path), ["train.steps=25", "plots=true",
                                  "synth.speed=0.5"], seed=3)
    assert cfg["train"]["steps"] == 25
    assert cfg["train"]["learning_rate"] == 0.001
    assert cfg["plots"] is True
    assert cfg["synth"]["speed"] == 0.5
    assert cfg["seed"] == 3
    with pytest.raises(ConfigError):
        load_config(None, ["no_equals_sign"], None)
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a\n- list\n")
    with pytest.raises(ConfigError):
        load_config(str(bad), [], None)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_synth_gen_outputs(workdir):
    report = read_report(workdir["root"] / "gen" / "report.txt")
    assert report["num_frames"] == 16
    assert report["num_pairs"] == 14
    assert report["seed"] == 7
    assert "version" in report and "config_hash" in report
    assert not any("time" in k for k in report)
    resolved = yaml.safe_load(
        (workdir["root"] / "gen" / "config_resolved.yaml").read_text())
    assert resolved["synth"]["num_sequences"] == 2
    assert os.path.exists(workdir["dataset"] / "manifest.txt")


def test_pretrain_outputs(workdir):
    out = workdir["root"] / "pretrain"
    report = read_report(out / "report.txt")
    assert report["steps"] == 3
    assert np.isfinite(report["final_loss"])
    assert (out / "log.txt").read_text().startswith("step=0 ")
    assert os.path.exists(workdir["checkpoint"])


def test_eval_command(workdir, tmp_path):
    out = tmp_path / "eval"
    rc = main(["eval", "--out", str(out),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={workdir['checkpoint']}",
               "--set", "plots=true"])
    assert rc == 0
    report = read_report(out / "report.txt")
    assert report["num_frames"] == 16
    assert report["pmpjpe_mm"] > 0
    assert "seq.seq0001.accel_err_mm_s2" in report
    assert os.path.exists(out / "per_sequence.png")


def test_refine_and_context_eval(workdir, tmp_path):
    ref_out = tmp_path / "refine"
    rc = main(["refine", "--out", str(ref_out),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={workdir['checkpoint']}",
               "--set", "train.steps=2",
               "--set", "train.batch_size=4",
               "--set", "train.context_length=2",
               "--set", "train.freeze_baseline=true",
               "--seed", "7"])
    assert rc == 0
    report = read_report(ref_out / "report.txt")
    assert report["context_length"] == 2

    ev_out = tmp_path / "eval_ctx"
    rc = main(["eval", "--out", str(ev_out),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={ref_out / 'checkpoint.ckpt'}",
               "--set", "context_length=2"])
    assert rc == 0
    assert read_report(ev_out / "report.txt")["context_length"] == 2


def test_refine_unsup_command(workdir, tmp_path):
    out = tmp_path / "unsup"
    rc = main(["refine-unsup", "--out", str(out),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={workdir['checkpoint']}",
               "--set", "train.steps=2",
               "--set", "train.batch_size=4",
               "--seed", "7"])
    assert rc == 0
    assert os.path.exists(out / "checkpoint.ckpt")


def test_optimize_seq_command(workdir, tmp_path):
    out = tmp_path / "opt"
    rc = main(["optimize-seq", "--out", str(out),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={workdir['checkpoint']}",
               "--set", "sequence=seq0000",
               "--set", "train.steps=2"])
    assert rc == 0
    track = np.load(out / "track.npy")
    assert track.shape == (8, 85)
    # missing the sequence key is a usage error
    rc = main(["optimize-seq", "--out", str(tmp_path / "opt2"),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={workdir['checkpoint']}"])
    assert rc == 2


def test_flow_audit_command(workdir, tmp_path):
    out = tmp_path / "audit"
    rc = main(["flow-audit", "--out", str(out),
               "--set", f"dataset={workdir['dataset']}",
               "--set", f"checkpoint={workdir['checkpoint']}",
               "--set", "deltas=[1]",
               "--set", "plots=true"])
    assert rc == 0
    report = read_report(out / "report.txt")
    assert "dt1.mean_ratio" in report
    assert report["dt1.pairs"] + report["dt1.dropped"] \
        + report["dt1.degenerate"] == 14
    assert os.path.exists(out / "audit.png")


def test_exit_codes_for_bad_usage(workdir, tmp_path):
    # non-empty out dir without --force
    busy = tmp_path / "busy"
    busy.mkdir()
    (busy / "junk.txt").write_text("x")
    args = ["eval", "--out", str(busy),
            "--set", f"dataset={workdir['dataset']}",
            "--set", f"checkpoint={workdir['checkpoint']}"]
    assert main(args) == 2
    assert main(args + ["--force"]) == 0
    # unknown training key
    assert main(["pretrain", "--out", str(tmp_path / "a"),
                 "--set", f"dataset={workdir['dataset']}",
                 "--set", "train.stepz=3"]) == 2
    # missing dataset / checkpoint config keys
    assert main(["pretrain", "--out", str(tmp_path / "b")]) == 2
    assert main(["eval", "--out", str(tmp_path / "c"),
                 "--set", f"dataset={workdir['dataset']}"]) == 2
    # paths that do not exist
    assert main(["eval", "--out", str(tmp_path / "d"),
                 "--set", "dataset=/nonexistent/ds",
                 "--set", f"checkpoint={workdir['checkpoint']}"]) == 2
    assert main(["eval", "--out", str(tmp_path / "e"),
                 "--set", f"dataset={workdir['dataset']}",
                 "--set", "checkpoint=/nonexistent/model.ckpt"]) == 2


def test_worker_env_validation(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWFIT_NUM_WORKERS", "zero")
    assert main(["eval", "--out", str(tmp_path / "w1"),
                 "--set", f"dataset={workdir['dataset']}",
                 "--set", f"checkpoint={workdir['checkpoint']}"]) == 2
    monkeypatch.setenv("FLOWFIT_NUM_WORKERS", "0")
    assert main(["eval", "--out", str(tmp_path / "w2"),
                 "--set", f"dataset={workdir['dataset']}",
                 "--set", f"checkpoint={workdir['checkpoint']}"]) == 2
    monkeypatch.setenv("FLOWFIT_NUM_WORKERS", "1")
    assert main(["eval", "--out", str(tmp_path / "w3"),
                 "--set", f"dataset={workdir['dataset']}",
                 "--set", f"checkpoint={workdir['checkpoint']}"]) == 0


def test_repeat_runs_are_byte_identical(workdir, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = main(["pretrain", "--out", str(out),
                   "--set", f"dataset={workdir['dataset']}",
                   "--set", "train.steps=3",
                   "--set", "train.batch_size=4",
                   "--seed", "11"])
        assert rc == 0
        outs.append(out)
    for rel in ("checkpoint.ckpt", "report.txt", "log.txt",
                "config_resolved.yaml"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
