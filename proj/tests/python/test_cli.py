"""End-to-end checks of the command-line tool via subprocess.

The binary path arrives in TTT4REC_CLI (set by ctest).
"""

import hashlib
import os
import subprocess

import pytest

CLI = os.environ.get("TTT4REC_CLI")

pytestmark = pytest.mark.skipif(not CLI, reason="TTT4REC_CLI not set")


def run(*args, expect=0):
    proc = subprocess.run([CLI, *args], capture_output=True, text=True)
    assert proc.returncode == expect, (
        f"{' '.join(args)} -> {proc.returncode}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
    )
    return proc


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    raw = tmp / "raw.csv"
    run("synth", "--out", str(raw), "--users", "10", "--items", "25", "--length", "16",
        "--seed", "7", "--regimes", "cycle")
    prepared = tmp / "prepared.ds"
    out = run("prepare", "--input", str(raw), "--ratios", "3:2:5", "--min-len", "2",
              "--out", str(prepared))
    assert "users,items,interactions,mean_length,malformed" in out.stdout
    assert "10,25,160," in out.stdout
    return tmp, raw, prepared


def write_config(tmp, prepared, **overrides):
    cfg = {
        "data": str(prepared),
        "checkpoint": str(tmp / "model.ckpt"),
        "report_dir": str(tmp / "reports"),
        "embed_dim": 8,
        "inner": "linear",
        "dropout": 0,
        "max_context": 16,
        "epochs": 2,
        "batch_size": 8,
        "seed": 11,
    }
    cfg.update(overrides)
    path = tmp / "run.cfg"
    path.write_text("".join(f"{k}={v}\n" for k, v in cfg.items()))
    return path


def test_synth_is_deterministic(workspace, tmp_path):
    tmp, raw, _ = workspace
    again = tmp_path / "again.csv"
    run("synth", "--out", str(again), "--users", "10", "--items", "25", "--length", "16",
        "--seed", "7", "--regimes", "cycle")
    assert digest(raw) == digest(again)


def test_prepare_is_deterministic_and_echoes_ratios(workspace, tmp_path):
    tmp, raw, prepared = workspace
    again = tmp_path / "again.ds"
    run("prepare", "--input", str(raw), "--ratios", "3:2:5", "--min-len", "2",
        "--out", str(again))
    assert digest(prepared) == digest(again)
    assert "ratios=3:2:5" in prepared.read_text().splitlines()[1]


def test_train_eval_recommend(workspace):
    tmp, _, prepared = workspace
    cfg = write_config(tmp, prepared)
    run("train", "--config", str(cfg))
    assert (tmp / "model.ckpt").exists()
    loss_lines = (tmp / "reports" / "train_loss.csv").read_text().splitlines()
    assert "epoch,mean_loss,target_positions" in loss_lines
    assert any(line.startswith("1,") for line in loss_lines)

    out = run("eval", "--config", str(cfg), "--segment", "test")
    assert "segment,metric,cutoff,value,instances" in out.stdout
    assert (tmp / "reports" / "eval_test.csv").exists()

    val = run("eval", "--config", str(cfg), "--segment", "val")
    # 3:2:5 over 16 items: train 4, val 3, test 9 per user, 10 users
    assert val.stdout.splitlines()[1].endswith(",30")
    assert out.stdout.splitlines()[1].endswith(",90")

    rec = run("recommend", "--config", str(cfg), "--items", "i1,i2", "--top-k", "5")
    lines = rec.stdout.strip().splitlines()
    assert lines[0] == "item_id,probability"
    assert len(lines) == 6

    # a cutoff beyond the vocabulary returns everything ranked
    rec_all = run("recommend", "--config", str(cfg), "--items", "i1", "--top-k", "999")
    assert len(rec_all.stdout.strip().splitlines()) == 26


def test_eval_is_deterministic(workspace):
    tmp, _, prepared = workspace
    cfg = write_config(tmp, prepared)
    a = run("eval", "--config", str(cfg), "--segment", "test").stdout
    b = run("eval", "--config", str(cfg), "--segment", "test").stdout
    assert a == b


def test_train_epochs_zero_keeps_initialization(workspace, tmp_path):
    tmp, _, prepared = workspace
    ckpt1 = tmp_path / "init1.ckpt"
    ckpt2 = tmp_path / "init2.ckpt"
    cfg1 = write_config(tmp, prepared, epochs=0, checkpoint=str(ckpt1))
    cfg1 = cfg1.rename(tmp_path / "cfg1.cfg")
    run("train", "--config", str(cfg1))
    cfg2 = write_config(tmp, prepared, epochs=0, checkpoint=str(ckpt2))
    cfg2 = cfg2.rename(tmp_path / "cfg2.cfg")
    run("train", "--config", str(cfg2))
    assert digest(ckpt1) == digest(ckpt2)
    # magic leads the file
    assert ckpt1.read_bytes()[:8] == b"TTT4REC1"


def test_train_is_deterministic_and_replayable(workspace, tmp_path):
    tmp, _, prepared = workspace
    reports1 = tmp_path / "r1"
    reports2 = tmp_path / "r2"
    cfg1 = write_config(tmp, prepared, report_dir=str(reports1),
                        checkpoint=str(tmp_path / "m1.ckpt"))
    cfg1 = cfg1.rename(tmp_path / "det1.cfg")
    run("train", "--config", str(cfg1))
    cfg2 = write_config(tmp, prepared, report_dir=str(reports2),
                        checkpoint=str(tmp_path / "m2.ckpt"))
    cfg2 = cfg2.rename(tmp_path / "det2.cfg")
    run("train", "--config", str(cfg2))

    def body(path):
        # drop header comments, which echo the (differing) paths
        return [l for l in path.read_text().splitlines() if not l.startswith("#")]

    assert body(reports1 / "train_loss.csv") == body(reports2 / "train_loss.csv")
    assert digest(tmp_path / "m1.ckpt") == digest(tmp_path / "m2.ckpt")

    # the echoed header replays the run exactly (it rewrites reports1 in place)
    before = body(reports1 / "train_loss.csv")
    ckpt_before = digest(tmp_path / "m1.ckpt")
    echoed = [l[2:] for l in (reports1 / "train_loss.csv").read_text().splitlines()
              if l.startswith("# ") and "=" in l and not l.startswith("# command")]
    replay_cfg = tmp_path / "replay.cfg"
    replay_cfg.write_text("\n".join(echoed) + "\n")
    run("train", "--config", str(replay_cfg))
    assert body(reports1 / "train_loss.csv") == before
    assert digest(tmp_path / "m1.ckpt") == ckpt_before


def test_bad_config_lists_every_key(workspace, tmp_path):
    tmp, _, prepared = workspace
    bad = tmp_path / "bad.cfg"
    bad.write_text("data=x\nwibble=1\nwobble=2\n")
    proc = subprocess.run([CLI, "train", "--config", str(bad)], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "wibble" in proc.stderr
    assert "wobble" in proc.stderr


def test_gradcheck(workspace):
    out = run("gradcheck")
    assert "check,max_rel_error,tolerance,status" in out.stdout
    for name in ("matmul", "layer_norm", "ttt_scan_outer_linear", "model_transformer_mlp"):
        assert name in out.stdout
    assert "FAIL" not in out.stdout

    proc = subprocess.run([CLI, "gradcheck", "--selftest-corrupt"], capture_output=True,
                          text=True)
    assert proc.returncode == 2
    assert "FAIL" in proc.stdout
