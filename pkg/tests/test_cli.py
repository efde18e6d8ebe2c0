import json
import subprocess
import sys
from pathlib import Path

import pytest

from idiomcircuits.cli import main, parse_tau_grid
from idiomcircuits.errors import ConfigError

FIXTURES = Path(__file__).parent / "data" / "fixtures"


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


def _exp(name):
    return FIXTURES / name / "experiment.yaml"


def test_tau_grid_parsing():
    assert parse_tau_grid("0.001:0.003:0.001") == [0.001, 0.002, 0.003]
    assert parse_tau_grid("0.1,0.2") == [0.1, 0.2]
    assert len(parse_tau_grid("0.001:0.02:0.001")) == 20
    with pytest.raises(ConfigError):
        parse_tau_grid("0.1:0.05:0.01")
    with pytest.raises(ConfigError):
        parse_tau_grid("a,b")


def test_similarity(tmp_path, capsys):
    code, out, _ = _run(capsys, "similarity", "--experiment", _exp("step"), "--out", tmp_path)
    assert code == 0 and out["layer"] == 2
    assert len((tmp_path / "similarity.csv").read_text().splitlines()) == 6


def test_sweep_one_row_per_tau(tmp_path, capsys):
    code, out, _ = _run(capsys, "sweep", "--experiment", _exp("minimal"), "--tau-grid", "0.001:0.02:0.001",
                        "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "sweep_0.csv").read_text().splitlines()
    assert lines[0] == "tau,edge_count,cosine" and len(lines) == 21


def test_sweep_svg_and_suggest(tmp_path, capsys):
    code, _, _ = _run(capsys, "sweep", "--experiment", _exp("minimal"), "--tau-grid", "0.01,0.1,1",
                      "--format", "svg", "--out", tmp_path)
    assert code == 0 and (tmp_path / "sweep_0.svg").read_text().startswith("<?xml")
    data = Path(__file__).parent / "data" / "sweep_reconstruction.csv"
    code, out, _ = _run(capsys, "suggest-tau", "--sweep", data)
    assert code == 0 and out["suggestions"][0]["tau"] == pytest.approx(0.007)


def _pipeline(tmp, capsys):
    e = _exp("single")
    assert _run(capsys, "discover", "--experiment", e, "--out", tmp)[0] == 0
    assert _run(capsys, "merge", "--circuit", tmp / "circuit_0.json", "--circuit", tmp / "circuit_1.json",
                "--out", tmp)[0] == 0
    assert _run(capsys, "prune", "--circuit", tmp / "merged.json", "--out", tmp)[0] == 0
    assert _run(capsys, "render", "--circuit", tmp / "pruned.json", "--out", tmp)[0] == 0
    return {p.name: p.read_bytes() for p in sorted(tmp.iterdir())}


def test_pipeline_is_byte_identical(tmp_path, capsys):
    a = _pipeline(tmp_path / "a", capsys)
    b = _pipeline(tmp_path / "b", capsys)
    assert set(a) == {"circuit_0.json", "circuit_1.json", "merged.json", "pruned.json", "pruned.dot"}
    assert a == b


def test_render_negative_edge_is_blue(tmp_path, capsys):
    _run(capsys, "discover", "--experiment", _exp("suppressor"), "--out", tmp_path)
    _run(capsys, "render", "--circuit", tmp_path / "circuit_0.json", "--out", tmp_path)
    assert "color=blue" in (tmp_path / "circuit_0.dot").read_text()


def test_analyze_and_oracle(tmp_path, capsys):
    _run(capsys, "discover", "--experiment", _exp("chain"), "--out", tmp_path)
    code, _, _ = _run(capsys, "analyze", "--circuit", tmp_path / "circuit_0.json", "--out", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    aug = report[str(tmp_path / "circuit_0.json")]["augmented_reception"]
    assert aug == [{"kind": "Head", "layer": 1, "head": 1, "token": 3}]
    code, _, _ = _run(capsys, "analyze", "--reference", "--out", tmp_path)
    golden = Path(__file__).parent / "data" / "reference_head_effects.txt"
    assert (tmp_path / "head_effects.txt").read_text() == golden.read_text()
    code, _, _ = _run(capsys, "oracle", "--experiment", _exp("minimal"), "--out", tmp_path)
    effects = json.loads((tmp_path / "oracle_0.json").read_text())["effects"]
    assert code == 0 and len(effects) == 20


def test_analyze_qk(tmp_path, capsys):
    code, _, _ = _run(capsys, "analyze", "--experiment", _exp("single"), "--qk-head", "0,0",
                      "--qk-pair", "kicked|bucket", "--qk-pair", "booted|pail", "--format", "csv", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "qk.csv").read_text().splitlines()[0] == "query,key,dot,corrupted_query_dot,corrupted_key_dot"


def test_layer_and_tau_overrides(tmp_path, capsys):
    code, out, _ = _run(capsys, "discover", "--experiment", _exp("chain"), "--layer", "0", "--tau", "0.001",
                        "--out", tmp_path)
    assert code == 0 and out["layer"] == 0


@pytest.mark.parametrize("argv,kind,code", [
    (["discover", "--experiment", "missing.yaml"], "FileNotFoundError", 1),
    (["discover"], "ConfigError", 1),
    (["sweep", "--experiment", str(_exp("minimal")), "--tau-grid", "x"], "ConfigError", 1),
    (["discover", "--experiment", str(_exp("minimal")), "--corruption", "5"], "ConfigError", 1),
    (["discover", "--experiment", str(_exp("minimal")), "--layer", "9"], "ConfigError", 1),
    (["frobnicate"], "UsageError", 2),
    (["discover", "--tau", "abc"], "UsageError", 2),
])
def test_errors_are_json_records(tmp_path, capsys, argv, kind, code):
    got, out, err = _run(capsys, *argv, "--out", tmp_path) if argv[0] != "frobnicate" else _run(capsys, *argv)
    assert got == code and out is None
    assert err["ok"] is False and err["error"] == kind and err["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "idiomcircuits", "discover", "--experiment", str(_exp("minimal")),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["edges"] == [3]
