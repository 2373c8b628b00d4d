"""
Unit tests for the p2pfl-sim command line
"""

import json
import os

import pytest

from p2pfl_sim import cli, io, util


def test_presets(capsys):
    assert cli.main(["presets"]) == cli.EXIT_OK
    names = capsys.readouterr().out.splitlines()
    assert names[0] == "p2p5-benign"
    assert "graph-timevarying" in names


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["--version"])
    assert excinfo.value.code == 0
    assert capsys.readouterr().out.startswith("p2pfl-sim ")


def test_run(tmp_path):
    out = str(tmp_path / "run")
    argv = ["run", "--preset", "p2p5-node4-labelflip", "--set", "t_max=20", "--out", out]
    assert cli.main(argv) == cli.EXIT_OK
    assert sorted(os.listdir(out)) == ["records.csv", io.RESOLVED_CONFIG_FILE, io.SUMMARY_FILE]
    resolved = io.load_json(os.path.join(out, io.RESOLVED_CONFIG_FILE))
    assert resolved["scenario"]["t_max"] == 20
    assert resolved["output"] == {"directory": out, "format": "csv"}
    summary = io.load_json(os.path.join(out, io.SUMMARY_FILE))
    assert summary["Verdict coordinates"] == [1, 2]
    assert len(io.load_record(os.path.join(out, "records.csv"))) == 5 * 20


def test_run_json_with_seed(tmp_path):
    out = str(tmp_path)
    argv = ["-v", "run", "--preset", "p2p5-benign", "--set", "t_max=5", "--seed", "3",
            "--workers", "2", "--format", "json", "--out", out]
    assert cli.main(argv) == cli.EXIT_OK
    resolved = io.load_json(os.path.join(out, io.RESOLVED_CONFIG_FILE))
    assert resolved["scenario"]["seed"] == 3
    assert resolved["workers"] == 2
    assert io.find_record(out).endswith("records.json")


def test_run_config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "schema: p2pfl-sim/1\n"
        "preset: p2p5-majority-compromised\n"
        "overrides:\n"
        "  t_max: 12\n"
        f"output:\n  directory: {tmp_path / 'out'}\n"
    )
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_OK
    summary = io.load_json(str(tmp_path / "out" / io.SUMMARY_FILE))
    assert summary["Verdict coordinates"] == [1]


def test_replay(tmp_path, capsys):
    out = str(tmp_path)
    argv = ["run", "--preset", "p2p5-node4-labelflip", "--set", "t_max=20", "--out", out]
    assert cli.main(argv) == cli.EXIT_OK
    again = str(tmp_path / "again.json")
    assert cli.main(["replay", out, "--out", again]) == cli.EXIT_OK
    original = io.load_json(os.path.join(out, io.SUMMARY_FILE))
    assert io.load_json(again) == original
    capsys.readouterr()
    assert cli.main(["replay", out]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out) == original


def test_resolved_config_round_trip(tmp_path):
    first = str(tmp_path / "first")
    argv = ["run", "--preset", "p2p5-node4-labelflip", "--set", "t_max=10", "--seed", "5",
            "--out", first]
    assert cli.main(argv) == cli.EXIT_OK
    path = os.path.join(first, io.RESOLVED_CONFIG_FILE)
    with open(path) as f:
        text = f.read()
    again = str(tmp_path / "again.json")
    io.save_json(io.load_config(path).to_dict(), again)
    with open(again) as f:
        assert f.read() == text
    # Rerunning the resolved config reproduces the record byte for byte
    second = str(tmp_path / "second")
    assert cli.main(["run", "--config", path, "--out", second]) == cli.EXIT_OK
    with open(os.path.join(first, "records.csv")) as a, open(os.path.join(second, "records.csv")) as b:
        assert a.read() == b.read()
    assert cli.main(["replay", second, "--out", again]) == cli.EXIT_OK
    assert io.load_json(again) == io.load_json(os.path.join(first, io.SUMMARY_FILE))


def test_verify(capsys):
    argv = ["verify", "--preset", "p2p5-line-node4-labelflip", "--horizon", "50"]
    assert cli.main(argv) == cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert not report["satisfied"]
    assert not report["relaxed_connectivity"]["satisfied"]
    assert cli.main(["verify", "--preset", "p2p5-benign"]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["satisfied"]


def test_invariant_breach(tmp_path):
    out = str(tmp_path)
    argv = [
        "run",
        "--preset",
        "p2p5-node4-labelflip",
        "--set",
        "algorithm=bayp2pfl",
        "--set",
        "attacks.4.kind=bit-flip",
        "--out",
        out,
    ]
    assert cli.main(argv) == cli.EXIT_BREACH
    # The partial record is kept next to a summary of the breach
    assert os.path.exists(os.path.join(out, "records.csv"))
    summary = io.load_json(os.path.join(out, io.SUMMARY_FILE))
    assert summary["Vulnerability witness"]
    assert summary["Model attacks"] == ["bit-flip"]
    assert summary["Invariant breach"]["client"] != 4
    assert summary["Rows recorded"] > 0


def test_analysis_error(tmp_path, monkeypatch):
    out = str(tmp_path)
    argv = ["run", "--preset", "p2p5-benign", "--set", "t_max=3", "--out", out]
    assert cli.main(argv) == cli.EXIT_OK

    def fail(record, scenario):
        raise util.AnalysisError("run record has no rows")

    monkeypatch.setattr(cli.analysis, "evaluate", fail)
    assert cli.main(["replay", out]) == cli.EXIT_ANALYSIS


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--preset", "p2p6-benign"],
        ["run", "--preset", "p2p5-benign", "--set", "kappa"],
        ["run", "--preset", "p2p5-benign", "--set", "kappa=-1"],
        ["run", "--preset", "p2p5-benign", "--workers", "0"],
        ["verify"],
    ],
)
def test_invalid_configuration(argv, tmp_path):
    assert cli.main(argv + (["--out", str(tmp_path)] if argv[0] == "run" else [])) == cli.EXIT_CONFIG


def test_missing_files(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_IO
    assert cli.main(["replay", str(tmp_path)]) == cli.EXIT_IO


def test_exclusive_sources():
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["run", "--preset", "p2p5-benign", "--config", "run.yaml"])
    assert excinfo.value.code == 2
