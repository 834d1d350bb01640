import json
import textwrap

import pytest

from lorentz_lld.cli import (
    RECORD_NAME,
    ConfigError,
    MissingArtifacts,
    RunRecord,
    load_experiment,
    main,
    parse_config,
    report,
)
from lorentz_lld.montecarlo import WORKERS_ENV

DISK = """
[[disk]]
center = [0.5, 0.5]
radius = 0.25
"""


def write(tmp_path, name, body):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return p


def test_validate_ok(tmp_path, capsys):
    cfg = write(tmp_path, "ok.toml", """
        [run]
        mode = "renewal"
        n_values = [1]
        [model]
        name = "bernoulli"
        """)
    assert main(["validate", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("ok: mode=renewal")


def test_bad_radius_names_field(tmp_path, capsys):
    cfg = write(tmp_path, "bad.toml", """
        [run]
        mode = "tail"
        n_values = [1]
        samples = 10
        [[disk]]
        center = [0.5, 0.5]
        radius = 0.6
        """)
    assert main(["validate", "--config", str(cfg)]) == 1
    assert "disk[0].radius" in capsys.readouterr().err


def test_every_problem_is_listed():
    with pytest.raises(ConfigError) as err:
        parse_config({"run": {"mode": "nope", "samples": -1, "seed": -3, "extra": 1}, "junk": {}})
    fields = {p.split(":")[0] for p in err.value.problems}
    assert {"run.mode", "run.samples", "run.seed", "run.extra", "junk"} <= fields


def test_model_section_rules():
    with pytest.raises(ConfigError):
        parse_config({"run": {"mode": "abstract", "n_values": [4]}})
    with pytest.raises(ConfigError):
        parse_config({"run": {"mode": "abstract", "n_values": [4]}, "model": {"name": "unknown"}})
    cfg = parse_config({"run": {"mode": "abstract", "n_values": [4]}, "model": {"name": "heavy-300"}})
    assert cfg.model == {"name": "heavy-300"}


def test_digest_ignores_workers():
    doc = {"run": {"mode": "renewal", "n_values": [1]}, "model": {"name": "bernoulli"}}
    a = parse_config(doc)
    doc["run"]["workers"] = 3
    assert parse_config(doc).digest() == a.digest()
    doc["run"]["seed"] = 5
    assert parse_config(doc).digest() != a.digest()


def test_worker_precedence(tmp_path, monkeypatch):
    cfg = parse_config({"run": {"mode": "renewal", "n_values": [1], "workers": 1}, "model": {"name": "bernoulli"}})
    assert cfg.effective_workers() == 1
    monkeypatch.setenv(WORKERS_ENV, "1")
    cfg.worker_override = 1
    assert cfg.effective_workers() == 1


def _renewal(tmp_path, out="out"):
    return write(tmp_path, "renewal.toml", f"""
        output_dir = "{out}"
        [run]
        mode = "renewal"
        n_values = [1]
        [model]
        name = "period-two"
        """)


def test_renewal_run_is_reproducible(tmp_path, capsys):
    cfg = _renewal(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    first = (out / "renewal.csv").read_bytes()
    rec = RunRecord.load(out)
    assert rec.ok and rec.mode == "renewal"
    assert main(["run", "--config", str(cfg), "--workers", "1"]) == 0
    assert (out / "renewal.csv").read_bytes() == first
    assert "pass" in capsys.readouterr().out


def test_lld_run_and_report(tmp_path):
    cfg = write(tmp_path, "lld.toml", """
        output_dir = "lld"
        [run]
        mode = "billiard-lld"
        n_values = [4, 16]
        samples = 20000
        seed = 3
        min_count = 30
        """ + DISK)
    code = main(["run", "--config", str(cfg)])
    assert code in (0, 2)
    out = tmp_path / "lld"
    data = sorted(p.name for p in out.iterdir())
    assert "lld_ratios.csv" in data and RECORD_NAME in data
    again = tmp_path / "lld2"
    assert main(["run", "--config", str(cfg), "--out", str(again)]) == code
    assert (again / "lld_ratios.csv").read_bytes() == (out / "lld_ratios.csv").read_bytes()
    rec = json.loads((out / RECORD_NAME).read_text())
    assert "lld_slope<=0.1" in rec["verdicts"]
    path = report(tmp_path)
    text = path.read_text()
    assert "local large deviation bound" in text
    assert (tmp_path / "report_tables.csv").exists()


def test_corridor_mode(tmp_path):
    cfg = write(tmp_path, "corr.toml", """
        output_dir = "corr"
        [run]
        mode = "corridor-corr"
        n_values = [1]
        samples = 50000
        p_range = [2, 4]
        r_range = [0, 1]
        """ + DISK)
    assert main(["run", "--config", str(cfg)]) in (0, 2)
    lines = (tmp_path / "corr" / "corridor_correlation.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert "ratios_in_[0,1]" in RunRecord.load(tmp_path / "corr").verdicts


def test_seed_override_changes_output(tmp_path):
    cfg = write(tmp_path, "tail.toml", """
        output_dir = "t1"
        [run]
        mode = "tail"
        n_values = [1]
        samples = 200000
        thresholds = [1, 2, 4, 8, 16, 32, 64]
        fit_window = [2, 32]
        """ + DISK)
    main(["run", "--config", str(cfg)])
    main(["run", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "t2")])
    a = (tmp_path / "t1" / "tail.csv").read_bytes()
    b = (tmp_path / "t2" / "tail.csv").read_bytes()
    assert a != b
    assert json.loads((tmp_path / "t2" / "config.json").read_text())["run"]["seed"] == 9


def test_report_on_empty_directory(tmp_path, capsys):
    with pytest.raises(MissingArtifacts):
        report(tmp_path)
    assert main(["report", "--in", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_report_with_missing_file(tmp_path):
    cfg = _renewal(tmp_path)
    main(["run", "--config", str(cfg)])
    (tmp_path / "out" / "renewal.csv").unlink()
    with pytest.raises(MissingArtifacts):
        report(tmp_path)


def test_oracle_command(tmp_path, capsys):
    cfg = write(tmp_path, "o.toml", """
        [run]
        mode = "abstract"
        n_values = [2, 3]
        [model]
        name = "heavy-2"
        """)
    assert main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "oracle")]) == 0
    files = list((tmp_path / "oracle").iterdir())
    assert files


def test_abstract_mode(tmp_path):
    cfg = write(tmp_path, "a.toml", """
        output_dir = "abs"
        [run]
        mode = "abstract"
        n_values = [8, 16, 32]
        [model]
        name = "heavy-64"
        """)
    assert main(["run", "--config", str(cfg)]) == 0
    rec = RunRecord.load(tmp_path / "abs")
    assert all(rec.verdicts.values())


def test_load_experiment_resolves_relative_output(tmp_path):
    cfg = load_experiment(_renewal(tmp_path, out="rel/dir"))
    assert cfg.output_dir == tmp_path / "rel" / "dir"


def test_unreadable_config(tmp_path, capsys):
    p = tmp_path / "broken.toml"
    p.write_text("[run\nmode=")
    assert main(["validate", "--config", str(p)]) == 1
