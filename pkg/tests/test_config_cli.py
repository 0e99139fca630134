import io
import json

import numpy as np
import pytest

from slotground import cli
from slotground.acceptance import CriterionResult
from slotground.config import ConfigError, RunConfig, apply_override

TINY = {
    "n_train": 8, "n_eval": 4, "seeds": [0],
    "gen": {"image_size": 8, "grid": 4, "defect_size": [1, 4], "n_points": [64, 96]},
    "model": {"width": 8, "grid": 4, "image_size": 8, "n_centers": 8, "knn": 4, "K": 2, "T": 2, "lora_rank": 2},
    "train": {"pt_steps": 4, "pt_batch": 8, "sft_max_steps": 4, "sft_batch": 4, "sft_eval_every": 2,
              "rft_steps": 2, "rft_batch": 2, "eval_samples": 1},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


# ---------------------------------------------------------------- config

def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()


def test_override_parsing():
    d = {}
    apply_override(d, "train.sft_lr=0.01")
    apply_override(d, "scorer.kind=rule")
    apply_override(d, "seeds=[4, 5]")
    assert d == {"train": {"sft_lr": 0.01}, "scorer": {"kind": "rule"}, "seeds": [4, 5]}
    cfg = RunConfig.from_dict(d)
    assert cfg.train.sft_lr == 0.01 and cfg.seeds == (4, 5)
    with pytest.raises(ConfigError):
        apply_override(d, "novalue")


@pytest.mark.parametrize("override,path", [
    ("train.sft_lr=fast", "train.sft_lr"),
    ("model.K=1.5", "model.K"),
    ("train.bogus=1", "train.bogus"),
    ("model.grid=8", "model.grid"),
    ("scorer.kind=http", "scorer"),
    ("model.T=0", "model"),
])
def test_config_errors_name_the_field(override, path):
    with pytest.raises(ConfigError) as e:
        RunConfig.load(None, [override])
    assert e.value.path == path


def test_cli_config_error_exit_code(capsys):
    assert cli.main(["gen", "--set", "train.sft_lr=fast"]) == cli.EXIT_CONFIG
    assert "train.sft_lr" in capsys.readouterr().err


def test_cli_missing_config_file(tmp_path, capsys):
    assert cli.main(["gen", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- commands

def test_gen_is_byte_reproducible(tmp_path, tiny_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen", "--config", tiny_cfg, "--n", "5", "--out", str(a)]) == 0
    assert cli.main(["gen", "--config", tiny_cfg, "--n", "5", "--out", str(b)]) == 0
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert fa == fb and len(fa) > 5
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_stage_commands_chain(tmp_path, tiny_cfg, capsys):
    data = tmp_path / "data"
    assert cli.main(["gen", "--config", tiny_cfg, "--out", str(data)]) == 0
    common = ["--config", tiny_cfg, "--data", str(data)]
    assert cli.main(["pretrain", *common, "--out", str(tmp_path / "pt")]) == 0
    assert cli.main(["sft", *common, "--init", str(tmp_path / "pt" / "pt.zsgc"), "--out", str(tmp_path / "sft")]) == 0
    sft_ck = str(tmp_path / "sft" / "sft.zsgc")
    assert cli.main(["rft", *common, "--init", sft_ck, "--corrupt", "--out", str(tmp_path / "rft")]) == 0
    assert cli.main(["eval", *common, "--ckpt", sft_ck, "--out", str(tmp_path / "ev")]) == 0
    assert cli.main(["ground", *common, "--ckpt", sft_ck, "--index", "1", "--out", str(tmp_path / "gr")]) == 0
    for d in ("pt", "sft", "rft", "ev", "gr"):
        m = json.loads((tmp_path / d / "manifest.json").read_text())
        assert m["seed"] == 0 and m["config_hash"] == RunConfig.load(tiny_cfg).hash()
    assert (tmp_path / "rft" / "history.jsonl").read_text().count("\n") == 2
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["n"] == 4
    assert {"m_slot.pgm", "m_hat.pgm", "slot_0.pgm", "slot_1.pgm", "report.json"} <= \
        {p.name for p in (tmp_path / "gr").iterdir()}
    assert np.load(tmp_path / "gr" / "m_hat.npy").shape == (8, 8)
    assert cli.main(["ground", *common, "--index", "99", "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("preset", ["rft-no-rf", "no-slots", "one-hop", "no-bca"])
def test_ablate_presets(preset, tmp_path, tiny_cfg, capsys):
    assert cli.main(["ablate", preset, "--config", tiny_cfg, "--out", str(tmp_path / "ab")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["preset"] == preset
    assert ("full" in out) == preset.startswith("rft-")


def test_validate_report_file_and_stdin(tmp_path, monkeypatch, capsys):
    good = {"DefectType": "dent", "DefectLocation": "center surface", "Reasoning": "a dent", "Confidence": 0.4}
    bad = dict(good, Confidence=1.5)
    text = json.dumps(good) + "\n\n" + json.dumps(bad) + "\nnot json\n"
    path = tmp_path / "r.jsonl"
    path.write_text(text)
    assert cli.main(["validate-report", str(path)]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [x["valid"] for x in lines[:3]] == [1, 0, 0]
    assert lines[1]["violations"] == [{"kind": "range", "field": "Confidence"}]
    assert lines[-1]["schema_rate"] == pytest.approx(1 / 3)
    monkeypatch.setattr("sys.stdin", io.StringIO(text))
    assert cli.main(["validate-report", "-"]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["n"] == 3


def test_eval_assert_passes_and_writes_results(tmp_path, capsys):
    assert cli.main(["eval", "--assert", "--only", "4", "--out", str(tmp_path)]) == cli.EXIT_OK
    res = json.loads((tmp_path / "acceptance.json").read_text())
    assert len(res) == 1 and res[0]["passed"] and res[0]["id"] == 4
    assert "[PASS]" in capsys.readouterr().out


def test_eval_assert_failure_exit_code(tmp_path, monkeypatch):
    def fake(cfg, only=None, echo=False):
        return [CriterionResult(4, "forced", False, {}, 0.0)]
    monkeypatch.setattr("slotground.acceptance.run_all", fake)
    assert cli.main(["eval", "--assert", "--out", str(tmp_path)]) == cli.EXIT_ACCEPT
