import csv
import json

import pytest
import yaml

from fdbench.cli import main

SMALL_MODEL = {
    "schema_version": 1,
    "kind": "model",
    "name": "pair",
    "A": [[-1.0, 1.0], [0.0, -2.0]],
    "B": [[0.0], [1.0]],
    "C": [[1.0, 0.0], [0.0, 1.0]],
    "E_f": [[1.0], [0.0]],
    "controller": {"K": [[0.0, 0.0]]},
    "design": {"sigma_bar": 2.0, "detectors": [{"name": "obs", "kind": "output", "r_th": 0.1}]},
}


def _write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def uio_certs(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--model", "helicopter", "--observer", "uio", "--out", str(out)]) == 0
    return out


def test_synth_uio_writes_one_certificate_per_channel(uio_certs, capsys):
    names = sorted(p.name for p in uio_certs.glob("*.fdcert"))
    assert names == ["uio1.fdcert", "uio2.fdcert", "uio3.fdcert"]
    manifest = json.loads((uio_certs / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["observer"] == "uio"


def test_synth_prints_stable_prefixes(tmp_path, capsys):
    assert main(["synth", "--model", "helicopter", "--observer", "output", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines] == ["OBSERVER", "THRESHOLDS", "WROTE"]


def test_synth_output_on_small_model(tmp_path):
    model = _write_yaml(tmp_path / "pair.yaml", SMALL_MODEL)
    assert main(["synth", "--model", model, "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "obs.fdcert").is_file()


def test_synth_reports_uio_existence_failure(tmp_path, capsys):
    data = dict(SMALL_MODEL)
    # C E_d = 0 while E_d has rank one
    data["E_d"] = [[0.0], [1.0]]
    data["C"] = [[1.0, 0.0]]
    data["design"] = {"detectors": [{"name": "u", "kind": "uio", "r_th": 0.1}]}
    model = _write_yaml(tmp_path / "bad.yaml", data)
    assert main(["synth", "--model", model, "--out", str(tmp_path / "out")]) == 1
    assert "UIO existence" in capsys.readouterr().err


def test_bad_model_file_is_input_error(tmp_path, capsys):
    model = _write_yaml(tmp_path / "broken.yaml", {"kind": "model"})
    assert main(["synth", "--model", model, "--out", str(tmp_path / "out")]) == 2
    assert "schema_version" in capsys.readouterr().err


def test_unknown_flag_is_rejected(tmp_path):
    assert main(["synth", "--model", "helicopter", "--out", str(tmp_path), "--colour"]) == 2


def test_abbreviated_flag_is_rejected(tmp_path):
    assert main(["synth", "--mod", "helicopter", "--out", str(tmp_path)]) == 2


def test_verify_fresh_certificate(uio_certs, capsys):
    assert main(["verify", str(uio_certs / "uio2.fdcert"), "--model", "helicopter"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == "RESULT PASS"
    assert all(ln.startswith("CHECK PASS ") for ln in out[:-1])


def test_verify_tampered_certificate(uio_certs, tmp_path, capsys):
    text = (uio_certs / "uio1.fdcert").read_text()
    lines = text.split("\n")
    k = lines.index("[set E_n]") + 1
    lines[k] = lines[k][:-1] + ("1" if lines[k][-1] != "1" else "2")
    bad = tmp_path / "bad.fdcert"
    bad.write_text("\n".join(lines))
    assert main(["verify", str(bad), "--model", "helicopter"]) == 1
    assert "CHECK FAIL payload digest" in capsys.readouterr().out


def test_verify_missing_file(tmp_path):
    assert main(["verify", str(tmp_path / "nope.fdcert"), "--model", "helicopter"]) == 2


def test_annotate_writes_blocks(uio_certs, tmp_path, capsys):
    assert main(["annotate", str(uio_certs / "uio3.fdcert"), "--model", "helicopter",
                 "--out", str(tmp_path)]) == 0
    text = (tmp_path / "uio3.annot.c").read_text()
    assert text.startswith("// uio3: E_n invariant across one update\n/*@ assumes ")
    assert "blocks=2" in capsys.readouterr().out


def _simulate(out, *extra):
    return main(["simulate", "--model", "helicopter", "--scenario", "nominal",
                 "--out", str(out), *extra])


@pytest.fixture(scope="module")
def nominal_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    assert _simulate(a, "--seed", "3") == 0
    assert _simulate(b, "--seed", "3") == 0
    return a, b


def test_simulate_is_byte_identical(nominal_runs):
    a, b = nominal_runs
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    assert "trace.csv" in files and "report.txt" in files
    for name in files:
        if name != "manifest.json":
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_nominal_run_is_nominal_after_settling(nominal_runs):
    a, _ = nominal_runs
    for vf in a.glob("verdicts_*.csv"):
        with open(vf) as fh:
            rows = [r for r in csv.DictReader(fh) if float(r["t"]) >= 4.0]
        assert rows and all(r["mode"] == "Nominal" for r in rows), vf.name


def test_report_prefixes(nominal_runs, capsys):
    a, _ = nominal_runs
    assert main(["report", str(a)]) == 0
    prefixes = {ln.split()[0] for ln in capsys.readouterr().out.splitlines()}
    assert prefixes == {"RUN", "TALLY", "FINAL", "SLIDING", "SHARE"}


def test_report_on_empty_directory(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_simulate_rejects_nonpositive_step(tmp_path):
    assert _simulate(tmp_path, "--dt", "0") == 2


@pytest.mark.slow
def test_experiment1_latencies_within_three_seconds(tmp_path, capsys):
    assert main(["simulate", "--model", "helicopter", "--scenario", "experiment1",
                 "--observer", "output", "--out", str(tmp_path)]) == 0
    lat = [ln.split("latency=")[1] for ln in capsys.readouterr().out.splitlines()
           if ln.startswith("LATENCY")]
    assert len(lat) == 3
    assert all(v != "none" and float(v) <= 3.0 for v in lat)
