import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from crossdepict import config as cfgmod
from crossdepict.cli import EXIT_AUDIT, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from crossdepict.data import load_dataset
from crossdepict.evaluation import DomainShiftReport, EigenProjection, parse_report_tsv

SMALL = {
    "dataset": {"per_class": 12},
    "model": {"hidden": [24, 16]},
    "method": {"name": "fixed-head", "metareg": {"phase1_iterations": 3, "phase2_iterations": 2}},
    "schedule": {"iterations": 200, "eval_interval": 50},
    "bench": {"methods": ["baseline", "fixed-head"], "seeds": [0]},
}


def _config(tmp_path, doc, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def _outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "metadata.json"}


def test_defaults_are_documented_and_resolved():
    cfg = cfgmod.resolve()
    assert cfg["schedule"]["profile"] == "desk" and cfg["schedule"]["iterations"] == 3000
    assert cfg["dataset"]["per_class"] == 300 and cfg["method"]["name"] == "baseline"
    assert cfgmod.resolve(profile="paper")["schedule"]["iterations"] == 45000
    assert cfgmod.resolve(seed=9)["bench"]["seeds"] == [9]


def test_unknown_key_is_named():
    with pytest.raises(cfgmod.ConfigError, match="schedule.learning_rate"):
        cfgmod.resolve({"schedule": {"learning_rate": 0.1}})
    with pytest.raises(cfgmod.ConfigError, match="'colour'"):
        cfgmod.resolve({"colour": 1})


def test_invalid_values_are_config_errors():
    for doc in ({"method": {"name": "sgd"}}, {"schedule": {"profile": "fast"}},
                {"schedule": {"decay": 3.0}}, {"method": {"mldg": {"beta": -1}}},
                {"model": {"head": "fixed-random"}}, {"dataset": {"source": "load"}}):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve(doc)


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    cfg = _config(tmp_path, {})
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "photo\t300\t300\t300\t300\t300\t300\t300\t2100" in printed
    ds = load_dataset(tmp_path / "a" / "manifest.tsv")
    assert ds.domains == ("photo", "art", "cartoon", "sketch")
    assert all(set(ds.class_counts(d).values()) == {300} for d in ds.domains)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("photo.csv", "sketch.csv", "manifest.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_key_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path, {"schedule": {"learning_rate": 1}})
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "schedule.learning_rate" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "sub")]) == EXIT_CONFIG


def test_train_smoke_and_rerun(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == EXIT_OK
    assert capsys.readouterr().out == first
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    summary = (r1 / "summary.tsv").read_text().splitlines()[1].split("\t")
    assert summary[:2] == ["fixed-head", "sketch"] and np.isfinite(float(summary[2]))
    for name in ("summary.tsv", "train.log", "best.ckpt"):
        assert (r1 / name).read_bytes() == (r2 / name).read_bytes()
    resolved = json.loads((r1 / "config.resolved.json").read_text())
    assert resolved["schedule"]["iterations"] == 200 and resolved["schedule"]["lr"] == 5e-3
    assert "started" in json.loads((r1 / "metadata.json").read_text())


def test_train_mldg_single_training_domain(tmp_path, capsys):
    doc = {"dataset": {"domains": ["photo", "art"], "per_class": 5}, "method": {"name": "mldg"},
           "run": {"held_out": "art"}}
    out = tmp_path / "o"
    assert main(["train", "--config", str(_config(tmp_path, doc)), "--out", str(out)]) == EXIT_CONFIG
    assert "at least 2 training domains" in capsys.readouterr().err
    assert not (out / "train.log").exists()


def test_train_missing_manifest_is_data_error(tmp_path):
    doc = {"dataset": {"source": "load", "manifest": str(tmp_path / "none.tsv")}}
    assert main(["train", "--config", str(_config(tmp_path, doc)), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_bench_shape_and_byte_identical_rerun(tmp_path):
    doc = dict(SMALL, schedule={"iterations": 40, "eval_interval": 20})
    cfg = _config(tmp_path, doc)
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b1"), "--workers", "1"]) == EXIT_OK
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b2"), "--workers", "2"]) == EXIT_OK
    a, b = _outputs(tmp_path / "b1"), _outputs(tmp_path / "b2")
    a.pop("config.resolved.json"), b.pop("config.resolved.json")
    assert a == b
    rows = parse_report_tsv((tmp_path / "b1" / "report.tsv").read_text())
    assert list(rows) == ["baseline", "fixed-head"] and all(len(v) == 5 for v in rows.values())
    for vals in rows.values():
        assert abs(np.mean(vals[:4]) - vals[4]) < 0.005


def test_bench_audit_failure_exit_code(tmp_path, monkeypatch):
    import crossdepict.evaluation as ev
    from crossdepict.trainers import AuditError

    def broken(*args, **kwargs):
        raise AuditError("frozen head changed during training")

    monkeypatch.setattr(ev, "run_cell", broken)
    cfg = _config(tmp_path, SMALL)
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "1"]) == EXIT_AUDIT


def test_analyze_outputs_parse_back(tmp_path, capsys):
    doc = {"dataset": {"per_class": 20}}
    assert main(["analyze", "--config", str(_config(tmp_path, doc)), "--out", str(tmp_path / "a")]) == EXIT_OK
    kl = DomainShiftReport.from_tsv((tmp_path / "a" / "kl.tsv").read_text())
    assert kl.domains == ("photo", "art", "cartoon", "sketch") and np.all(np.diag(kl.kl) == 0)
    rows = EigenProjection.parse_tsv((tmp_path / "a" / "eigen.tsv").read_text())
    assert len(rows) == 28
    assert "sketch\tmean KL" in capsys.readouterr().out


def test_analyze_identical_domains_all_zero(tmp_path):
    one = tmp_path / "one"
    assert main(["gen-data", "--out", str(one),
                 "--config", str(_config(tmp_path, {"dataset": {"per_class": 10, "domains": ["photo"]}}))]) == 0
    manifest = one / "manifest.tsv"
    manifest.write_text(manifest.read_text() + "domain\tphoto2\tphoto.csv\n")
    doc = {"dataset": {"source": "load", "manifest": str(manifest)}}
    assert main(["analyze", "--config", str(_config(tmp_path, doc, "b.yaml")), "--out", str(tmp_path / "a")]) == 0
    kl = DomainShiftReport.from_tsv((tmp_path / "a" / "kl.tsv").read_text())
    assert np.all(kl.kl == 0)


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "crossdepict.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("gen-data", "train", "bench", "analyze"):
        assert name in out.stdout
