import json

import pytest

from mtta.cli import main, parse_sets, UsageError
from mtta.stream import list_batches, read_predictions

TINY_PRETRAIN = ["--set", "pretrain.n_source_profiles=8", "--set", "pretrain.source_minutes=0.1",
                 "--set", "pretrain.f_hidden=16", "--set", "pretrain.f_steps=20", "--set", "pretrain.m_steps=20",
                 "--set", "pretrain.latent_dim=4", "--set", "pretrain.width=6", "--set", "pretrain.n_codes=4",
                 "--set", "pretrain.m_batch=4", "--set", "pretrain.revive_every=10"]
FAST_ADAPT = ["--set", "adapt.cycles=1"]


def test_missing_model_flag_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["adapt", "--stream-dir", str(tmp_path), "--m-model", "m.mtta"])
    assert e.value.code == 2
    assert "--f-model" in capsys.readouterr().err


def test_unknown_flag_and_bad_config(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["selftest", "--bogus"])
    assert e.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["selftest", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"adapt": {"no_such_key": 1}}))
    assert main(["selftest", "--config", str(bad)]) == 2
    assert "no_such_key" in capsys.readouterr().err
    assert main(["selftest", "--set", "adapt.mu_f"]) == 2
    assert main(["stream-gen", "--shift", "source", "--out", str(tmp_path / "s")]) == 2


def test_parse_sets():
    assert parse_sets(["adapt.mu_f=0.9", "suite.shift=corrupted", "adapt.mu_m=null"]) == \
        {"adapt": {"mu_f": 0.9, "mu_m": None}, "suite": {"shift": "corrupted"}}
    with pytest.raises(UsageError):
        parse_sets(["=3"])


def test_selftest_transcript_is_deterministic(capsys):
    assert main(["selftest", "--seed", "7"]) == 0
    first = capsys.readouterr().out
    assert main(["selftest", "--seed", "7"]) == 0
    assert capsys.readouterr().out == first
    assert first.count("PASS") == 4 and "FAIL" not in first


def test_runtime_failure_exits_one(tmp_path, capsys):
    (tmp_path / "s").mkdir()
    (tmp_path / "s" / "p00000_b00000.mtsb").write_bytes(b"MTSB" + bytes(20))
    (tmp_path / "f.mtta").write_bytes(b"junk")
    code = main(["adapt", "--f-model", str(tmp_path / "f.mtta"), "--m-model", str(tmp_path / "f.mtta"),
                 "--stream-dir", str(tmp_path / "s"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "adapt failed" in capsys.readouterr().err


def test_full_pipeline(tmp_path, capsys):
    art, streams, out, abl = (tmp_path / d for d in ("art", "streams", "adapt", "ablate"))
    assert main(["pretrain", "--out", str(art), "--seed", "3", *TINY_PRETRAIN]) == 0
    assert (art / "f_pre.mtta").exists() and (art / "m_pre.mtta").exists()
    echoed = json.loads((art / "config.json").read_text())
    assert echoed["seed"] == 3 and echoed["pretrain"]["f_steps"] == 20 and echoed["adapt"]["cycles"] == 12

    assert main(["stream-gen", "--out", str(streams), "--persons", "2", "--minutes", "0.2"]) == 0
    files = list_batches(streams)
    assert len(files) == 2 and all(len(v) == 2 for v in files.values())

    models = ["--f-model", str(art / "f_pre.mtta"), "--m-model", str(art / "m_pre.mtta")]
    assert main(["adapt", *models, "--stream-dir", str(streams), "--out", str(out), *FAST_ADAPT]) == 0
    header = (out / "telemetry.csv").read_text().splitlines()[0]
    assert header == "person_id,batch_idx,mpjpe_mm,mpjpe_pa_mm,L_F,L_M,L_ach,drift,codebook_util,wall_ms"
    assert len(read_predictions(out / "predictions.bin")) == 4
    assert json.loads((out / "config.json").read_text())["adapt"]["cycles"] == 1

    assert main(["report", "--in", str(out)]) == 0
    assert (out / "report.md").exists() and "adapt" in (out / "report.md").read_text()

    assert main(["ablate", *models, "--out", str(abl), "--persons", "2", "--minutes", "0.1", "--seeds", "1",
                 "--axis", "soft_reset", *FAST_ADAPT]) == 0
    for name in ("grid.csv", "summary.csv", "report.md", "grid.json", "config.json"):
        assert (abl / name).exists()
    assert list((abl / "curves").glob("*.svg"))
    before = (abl / "report.md").read_bytes()
    assert main(["report", "--in", str(abl)]) == 0
    assert (abl / "report.md").read_bytes() == before
    capsys.readouterr()
    assert main(["report", "--in", str(tmp_path)]) == 2
