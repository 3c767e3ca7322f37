import json
import os

import numpy as np
import pytest

from icvit.cli import main
from icvit.data import load_checkpoint

SMALL = {
    "data": {"n_train": 48, "n_val": 24, "n_test": 24},
    "pretrain": {"steps": 3, "batch_size": 8, "warmup_steps": 1},
    "train": {"epochs": 1, "warmup_epochs": 0, "batch_size": 16},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    pre = root / "pre"
    assert main(["pretrain", "--config", str(cfg), "--data", str(data), "--out", str(pre)]) == 0
    ft = root / "ft"
    assert main(["finetune", "--config", str(cfg), "--data", str(data), "--init", str(pre / "pretrain.ckpt"),
                 "--out", str(ft)]) == 0
    return {"root": root, "cfg": str(cfg), "data": str(data), "pre": pre, "ft": ft}


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_gen_data_and_manifest(work):
    d = work["root"] / "data"
    assert sorted(os.listdir(d)) == ["manifest.json", "test.mcid", "train.mcid", "val.mcid"]
    man = _manifest(d)
    assert man["command"] == "gen-data" and man["counts"] == {"train": 48, "val": 24, "test": 24}
    assert len(man["config_hash"]) == 64 and man["version"].startswith("0.1.0")


def test_pretrain_outputs(work):
    pre = work["pre"]
    lines = (pre / "pretrain_log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    tensors, meta = load_checkpoint(pre / "pretrain.ckpt")
    assert meta["kind"] == "pretrain" and meta["step"] == 3
    assert any(k.startswith("dino_head.") for k in tensors) and "head.w" not in tensors


def test_finetune_and_eval(work):
    ft = work["ft"]
    man = _manifest(ft)
    assert man["command"] == "finetune" and 0.0 <= man["test_acc"] <= 1.0
    out = work["root"] / "ev"
    rc = main(["eval", "--ckpt", str(ft / "model.ckpt"), "--data", work["data"], "--partial", "0,1,2,3,4",
               "--out", str(out)])
    assert rc == 0
    res = json.loads((out / "eval.json").read_text())
    assert res["mask"] == "11111000" and res["channels"] == [0, 1, 2, 3, 4]


def test_eval_mask_and_partial_are_exclusive(work):
    rc = main(["eval", "--ckpt", str(work["ft"] / "model.ckpt"), "--data", work["data"], "--mask", "11110000",
               "--partial", "0", "--out", str(work["root"] / "x")])
    assert rc == 1
    rc = main(["eval", "--ckpt", str(work["ft"] / "model.ckpt"), "--data", work["data"], "--mask", "111",
               "--out", str(work["root"] / "x")])
    assert rc == 1


def test_subset_sweep_corr_attn(work):
    ck = str(work["ft"] / "model.ckpt")
    out = work["root"] / "an"
    assert main(["subset-sweep", "--ckpt", ck, "--data", work["data"], "--out", str(out)]) == 0
    summary = (out / "subset_summary.csv").read_text().splitlines()
    assert [int(r.split(",")[1]) for r in summary[1:]] == [8, 28, 56, 70, 56, 28, 8, 1]
    assert main(["corr", "--ckpt", ck, "--data", work["data"], "--n-images", "10", "--out", str(out)]) == 0
    assert (out / "corr_token.csv").exists() and (out / "corr_feature.csv").exists()
    assert main(["attn", "--ckpt", ck, "--data", work["data"], "--index", "2", "--out", str(out)]) == 0
    assert (out / "attn_2_ch7.pgm").exists()
    assert main(["attn", "--ckpt", ck, "--data", work["data"], "--index", "999", "--out", str(out)]) == 1


def test_bench(work):
    out = work["root"] / "bench"
    rc = main(["bench", "--config", work["cfg"], "--channels", "1,3", "--strategy", "full", "--steps", "1",
               "--out", str(out)])
    assert rc == 0
    rows = (out / "bench.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("full,1,17")


def test_exit_codes(work, tmp_path, capsys):
    assert main([]) == 1
    assert main(["nope"]) == 1
    assert main(["gen-data"]) == 1  # --out missing
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"epochz": 1}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", work["data"],
                 "--out", str(tmp_path / "o")]) == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"ICVK" + b"\x00" * 3)
    assert main(["eval", "--ckpt", str(junk), "--data", work["data"], "--out", str(tmp_path / "o")]) == 2
    assert main(["finetune", "--data", work["data"], "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "icvit: error" in err and "data error" in err


def test_finetune_rejects_mismatched_backbone(work, tmp_path):
    cfg = tmp_path / "wide.json"
    cfg.write_text(json.dumps({**SMALL, "model": {"dim": 48, "heads": 2}}))
    rc = main(["finetune", "--config", str(cfg), "--data", work["data"], "--init",
               str(work["pre"] / "pretrain.ckpt"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_config_dump(capsys, tmp_path):
    assert main(["config-dump", "--seed", "7"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["seed"] == 7
    assert main(["config-dump", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 0


def test_same_seed_same_data(work, tmp_path):
    assert main(["gen-data", "--config", work["cfg"], "--out", str(tmp_path)]) == 0
    a = (tmp_path / "train.mcid").read_bytes()
    b = (work["root"] / "data" / "train.mcid").read_bytes()
    assert a == b
    np.testing.assert_equal(len(a) > 0, True)
