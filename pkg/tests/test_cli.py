import json

import pytest

from cxrdistl.cli import main
from conftest import TINY


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text("profile = toy\n" + "".join(f"{k} = {v}\n" for k, v in TINY.items()), encoding="utf-8")
    return p


def test_help_exits_zero(capsys):
    assert main(["eval", "--help"]) == 0
    assert "--checkpoint" in capsys.readouterr().out


def test_unknown_flag_exit_one(capsys):
    assert main(["report", "--metrics", "m.json", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_no_or_unknown_subcommand(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1


def test_bad_config_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path), "--set", "loss.lambda=1.5"]) == 1
    assert "out of [0,1]" in capsys.readouterr().err


def test_runtime_failure_exit_two(tmp_path, capsys):
    assert main(["split", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "s.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_report_tables(tmp_path, capsys):
    from cxrdistl.metrics import disease_metrics

    p = tmp_path / "m.json"
    p.write_text(json.dumps({"disease": disease_metrics([0, 1, 2], [0, 1, 1]).to_json()}), encoding="utf-8")
    assert main(["report", "--metrics", str(p)]) == 0
    out = capsys.readouterr().out
    assert "Precision" in out and "Macro" in out and "66.67%" in out


def test_full_pipeline(tmp_path, cfg_file, capsys):
    c = ["--config", str(cfg_file)]
    out = tmp_path / "run"
    assert main(["synth", "--out-dir", str(out), *c]) == 0
    assert main(["prep", "--manifest", str(out / "raw_manifest.jsonl"), "--out-dir", str(out), *c]) == 0
    man = out / "prep" / "manifest.jsonl"
    assert main(["split", "--manifest", str(man), "--out", str(out / "split.json"), *c]) == 0
    common = ["--manifest", str(man), "--split", str(out / "split.json"), "--out-dir", str(out), *c]
    assert main(["train", "--phase", "1", *common]) == 0
    assert main(["train", "--phase", "2", "--fold", "0", *common]) == 0
    assert main(["train", "--phase", "2", "--fold", "1", *common]) == 0
    assert main(["train", "--phase", "2", "--fold", "2", *common]) == 0
    ck = out / "checkpoints" / "phase2" / "fold2" / "final"
    assert (ck / "model.safetensors").exists()

    assert main(["eval", "--checkpoint", str(ck), "--manifest", str(man), "--split", "test",
                 "--split-plan", str(out / "split.json"), "--out-dir", str(out), *c]) == 0
    rep = json.loads((out / "reports" / "eval_test.json").read_text())
    assert 0 <= rep["disease"]["accuracy"] <= 1 and "macro_f1" in rep["symptom"]
    assert "Macro" in (out / "reports" / "eval_test.txt").read_text()
    assert main(["report", "--metrics", str(out / "reports" / "eval_test.json")]) == 0

    assert main(["eval", "--checkpoint", str(ck), "--manifest", str(man), "--split", "test",
                 "--out-dir", str(out), *c]) == 1  # needs --split-plan

    img = sorted((out / "prep" / "images").rglob("*.png"))[0]
    assert main(["explain", "--checkpoint", str(ck), "--image", str(img), "--symptom", "nodule",
                 "--box", "2,2,10,10", "--out-dir", str(out), *c]) == 0
    info = json.loads((out / "overlays" / f"{img.stem}_nodule.json").read_text())
    assert "pointing_hit" in info["overlap"] and (out / "overlays" / f"{img.stem}_nodule.png").exists()
    assert main(["explain", "--checkpoint", str(ck), "--image", str(img), "--symptom", "tumour",
                 "--out-dir", str(out), *c]) == 1
    assert main(["explain", "--checkpoint", str(ck), "--manifest", str(man), "--out-dir", str(out), *c]) == 0
    agg = json.loads((out / "overlays" / "box_agreement.json").read_text())
    assert agg["n_boxes"] > 0


def test_env_seed_reaches_split(tmp_path, tiny_corpus, monkeypatch):
    root, _ = tiny_corpus
    man = str(root / "manifest.jsonl")
    monkeypatch.setenv("DISTL_SEED", "11")
    assert main(["split", "--manifest", man, "--out", str(tmp_path / "a.json")]) == 0
    assert json.loads((tmp_path / "a.json").read_text())["seed"] == 11
