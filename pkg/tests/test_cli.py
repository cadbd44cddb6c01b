import json

import pytest

from bookmark_memory import __version__
from bookmark_memory.cli import main
from bookmark_memory.harness import read_traces

from conftest import FIXTURES

GOLDEN = FIXTURES.parent / "golden"


def test_validate(capsys):
    assert main(["validate", str(FIXTURES / "popipa.jsonl")]) == 0
    assert capsys.readouterr().out.startswith("ok: 35 actions")


def test_validate_bad_file(tmp_path, capsys):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"character": "A", "text": "x"}\n{"character": "B", "text": ""}\n')
    assert main(["validate", str(p)]) == 1
    assert "line 2" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.jsonl")]) == 1


def test_run_matches_golden(run_dir, capsys):
    out = run_dir / "out"
    assert main(["run", "--config", str(run_dir / "scripted.cfg"), "--out", str(out)]) == 0
    assert capsys.readouterr().out == (GOLDEN / "popipa_report.csv").read_text()
    assert (out / "report.json").read_text() == (GOLDEN / "popipa_report.json").read_text()


def test_run_with_ablation_creates_only(run_dir):
    out = run_dir / "abl"
    code = main(["run", "--config", str(run_dir / "scripted.cfg"), "--ablation", "derive_off,reuse_off", "--out", str(out)])
    assert code == 0
    outcomes = {p["outcome"] for t in read_traces(out / "traces.jsonl") for p in t["proposals"]}
    assert outcomes == {"create"}
    report = json.loads((out / "report.json").read_text())
    assert report["ablation"] == ["derive_off", "reuse_off"]
    assert report["aggregate"]["saved_fraction"] == 0.0


def test_run_method_override(run_dir):
    out = run_dir / "ricl"
    assert main(["run", "--config", str(run_dir / "scripted.cfg"), "--method", "ricl", "--out", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["method"] == "ricl"


def test_run_bad_config(run_dir, capsys):
    cfg = run_dir / "scripted.cfg"
    cfg.write_text(cfg.read_text() + "run.mode = fast\n")
    assert main(["run", "--config", str(cfg), "--out", str(run_dir / "o")]) == 1
    assert "unknown config key 'run.mode'" in capsys.readouterr().err


def test_report_rebuilds_from_traces(run_dir, capsys):
    out = run_dir / "out"
    main(["run", "--config", str(run_dir / "scripted.cfg"), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--traces", str(out), "--format", "csv"]) == 0
    assert capsys.readouterr().out == (GOLDEN / "popipa_report.csv").read_text()
    target = run_dir / "r.json"
    assert main(["report", "--traces", str(out / "traces.jsonl"), "--format", "json", "--out", str(target)]) == 0
    assert json.loads(target.read_text())["aggregate"]["n_judged"] == 6


def test_cache_commands(run_dir, capsys):
    main(["run", "--config", str(run_dir / "scripted.cfg"), "--out", str(run_dir / "out")])
    cache = run_dir / "cache" / "oracle.jsonl"
    capsys.readouterr()
    assert main(["cache-verify", "--cache", str(cache)]) == 0
    assert "corrupt=0" in capsys.readouterr().out
    assert main(["cache-stats", "--cache", str(cache)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["entries"] == stats["valid"] > 0
    with open(cache, "a") as fh:
        fh.write("{broken\n")
    assert main(["cache-verify", "--cache", str(cache)]) == 1


def test_haystack_command(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"suite": {"kinds": ["concept", "state"], "depths": [50], "seeds": [0, 1], "filler_count": 100}}))
    out = tmp_path / "res.jsonl"
    assert main(["haystack", "--spec", str(spec), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "concept: 2/2 recovered" in text and "state: 2/2 recovered" in text
    assert len(out.read_text().splitlines()) == 4


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["run", "--config", "x", "--out", "y", "--turbo"])
    assert err.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_help_documents_flags(capsys):
    with pytest.raises(SystemExit) as err:
        main(["run", "--help"])
    assert err.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--method", "--ablation", "--characters", "--out"):
        assert flag in text


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out
