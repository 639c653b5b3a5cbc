import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from matk.cli import main
from matk.datakit import read_manifest
from matk.embedder import init_model, load_checkpoint


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--out", str(d / "a.ckpt")]) == 0
    assert main(["eval", "--model", str(d / "a.ckpt"), "--data", str(d / "data"), "--out", str(d / "clean.json")]) == 0
    return d


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth"])
    assert exc.value.code == 2
    assert "--out" in capsys.readouterr().err


def test_module_entry_exit_codes(tmp_path):
    run = subprocess.run([sys.executable, "-m", "matk", "train", "--data", str(tmp_path / "none"),
                          "--out", str(tmp_path / "x.ckpt")], capture_output=True, text=True)
    assert run.returncode == 1
    assert "error" in run.stderr and run.stdout == ""
    assert subprocess.run([sys.executable, "-m", "matk", "bogus"], capture_output=True).returncode == 2


def test_synth_layout_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "7", "--out", str(tmp_path / name), "--num-train-ids", "4",
                     "--num-test-ids", "3"]) == 0
    assert {p.name for p in (tmp_path / "a").iterdir() if p.is_dir()} == {"train", "probe", "gallery"}
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    rec = json.loads((tmp_path / "a.run.json").read_text())
    assert rec["command"] == "synth" and rec["args"]["contrast"] == 0.12


def test_train_outputs_and_baseline(ws):
    model = load_checkpoint(ws / "a.ckpt")
    assert model.training_loss_tag == "cross_entropy"
    log = json.loads((ws / "a.ckpt.losses.json").read_text())
    assert len(log["epoch_losses"]) == 60 and log["final_loss"] < log["epoch_losses"][0]
    rec = json.loads((ws / "a.ckpt.run.json").read_text())["args"]
    assert rec["batch_size"] == 32 and rec["epochs"] == 60 and rec["hidden"] == [256, 128]
    assert json.loads((ws / "clean.json").read_text())["mAP"] >= 0.7


def test_train_zero_epochs_is_fresh_init(ws, tmp_path):
    assert main(["train", "--data", str(ws / "data"), "--out", str(tmp_path / "z.ckpt"), "--epochs", "0",
                 "--seed", "3"]) == 0
    model = load_checkpoint(tmp_path / "z.ckpt")
    assert model.equals(init_model(model.config, 3))


def test_triplet_single_image_identity_fails(ws, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--num-train-ids", "4", "--num-test-ids", "2"]) == 0
    for p in sorted((data / "train").glob("0000_*.png"))[1:]:
        p.unlink()
    code = main(["train", "--data", str(data), "--out", str(tmp_path / "t.ckpt"), "--loss", "triplet", "--pk", "2,4"])
    assert code == 1
    assert "[0]" in capsys.readouterr().err


def test_attack_iters_and_duplicate_ensemble(ws, tmp_path):
    a = str(ws / "a.ckpt")
    assert main(["attack", "--data", str(ws / "data"), "--models", a, "--out", str(tmp_path / "one")]) == 0
    assert main(["attack", "--data", str(ws / "data"), "--models", f"{a},{a}", "--out", str(tmp_path / "two")]) == 0
    assert json.loads((tmp_path / "one" / "attack_config.json").read_text())["iters"] == 6
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")
    assert len(read_manifest(tmp_path / "one" / "manifest.jsonl")) == 192


def test_targeted_single_identity_fails(ws, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--num-train-ids", "2", "--num-test-ids", "1"]) == 0
    code = main(["attack", "--data", str(data), "--models", str(ws / "a.ckpt"), "--out", str(tmp_path / "adv"),
                 "--targeted"])
    assert code == 1


def test_eval_self_retrieval_and_baseline(ws, capsys):
    g = str(ws / "data" / "gallery")
    assert main(["eval", "--model", str(ws / "a.ckpt"), "--probe", g, "--gallery", g, "--protocol", "all"]) == 0
    assert json.loads(capsys.readouterr().out)["rank"]["1"] == 1.0
    assert main(["eval", "--model", str(ws / "a.ckpt"), "--data", str(ws / "data"),
                 "--baseline", str(ws / "clean.json")]) == 0
    assert "mAP ratio: 1.000000" in capsys.readouterr().out


def test_eval_adversarial_lower_and_strips(ws, tmp_path, capsys):
    adv = tmp_path / "adv"
    assert main(["attack", "--data", str(ws / "data"), "--models", str(ws / "a.ckpt"), "--out", str(adv)]) == 0
    out = tmp_path / "adv.json"
    assert main(["eval", "--model", str(ws / "a.ckpt"), "--data", str(ws / "data"), "--gallery", str(adv),
                 "--out", str(out), "--baseline", str(ws / "clean.json"), "--strips", "3"]) == 0
    assert json.loads(out.read_text())["mAP"] < json.loads((ws / "clean.json").read_text())["mAP"]
    lists = json.loads((tmp_path / "rankings" / "rankings.json").read_text())
    assert len(lists) == 3 and len(lists[0]["gallery"]) == 10
    assert (tmp_path / "rankings" / "probe_0000.png").exists()


def test_mahalanobis_metric_flag(ws, tmp_path, capsys):
    from matk.metrics import random_spd, save_mahalanobis
    save_mahalanobis(random_spd(64, 10, 0), tmp_path / "M.json")
    assert main(["eval", "--model", str(ws / "a.ckpt"), "--data", str(ws / "data"),
                 "--metric", f"mahalanobis:{tmp_path / 'M.json'}"]) == 0
    assert 0 < json.loads(capsys.readouterr().out)["mAP"] <= 1
    assert main(["eval", "--model", str(ws / "a.ckpt"), "--data", str(ws / "data"), "--metric", "cosine"]) == 1


def test_defend_outputs(ws, tmp_path):
    code = main(["--threads", "1", "defend", "--data", str(ws / "data"), "--model", str(ws / "a.ckpt"),
                 "--out", str(tmp_path / "d.ckpt"), "--adv-out", str(tmp_path / "yadv"), "--epochs", "3"])
    assert code == 0
    assert load_checkpoint(tmp_path / "d.ckpt").config == load_checkpoint(ws / "a.ckpt").config
    assert len(list((tmp_path / "yadv").glob("*.png"))) == 512
    assert json.loads((tmp_path / "d.ckpt.run.json").read_text())["args"]["seed"] == 1


def test_bench_table(ws, tmp_path):
    a = str(ws / "a.ckpt")
    assert main(["train", "--data", str(ws / "data"), "--out", str(tmp_path / "b.ckpt"), "--seed", "1",
                 "--epochs", "20"]) == 0
    out = tmp_path / "bench.json"
    assert main(["bench", "--data", str(ws / "data"), "--models", f"{a},{tmp_path / 'b.ckpt'}",
                 "--methods", "fgsm", "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert len(table["clean"]) == 2 and len(table["attacks"]) == 2
    row = table["attacks"][0]
    assert row["mAP"][a] < table["clean"][a]


def test_replay_reproduces(ws, tmp_path):
    assert main(["replay", str(ws / "a.ckpt.run.json"), "--out", str(tmp_path / "again.ckpt")]) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (ws / "a.ckpt").read_bytes()
    assert np.isfinite(json.loads((tmp_path / "again.ckpt.losses.json").read_text())["final_loss"])
