import io
import json
import subprocess
import sys

import pytest

from trustgov import cli


def run(argv, capsys=None):
    code = cli.main(argv)
    return code


def test_run_convergence_twice_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run-convergence", "--scenario", "default", "--seed", "7", "--out", str(a)]) == 0
    assert cli.main(["run-convergence", "--scenario", "default", "--seed", "7", "--out", str(b)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert {"convergence.csv", "summary.md", "metrics.json", "analysis.csv", "report.md"} <= {
        p.name for p in files}


def test_out_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["run-convergence", "--scenario", "fire_fallback", "--iterations", "2"]) == 0
    assert (tmp_path / "envout" / "convergence.csv").is_file()


def test_verify_chain_ok_and_tampered(tmp_path, capsys):
    cli.main(["run-convergence", "--out", str(tmp_path), "--requests", "5"])
    chain = tmp_path / "chains" / "sora.chain"
    capsys.readouterr()
    assert cli.main(["verify-chain", str(chain)]) == 0
    idx = [int(l.split()[1]) for l in (tmp_path / "chains" / "sora.chain.idx").read_text().splitlines()]
    data = bytearray(chain.read_bytes())
    data[idx[7] + 60] ^= 0x10
    chain.write_bytes(bytes(data))
    assert cli.main(["verify-chain", str(chain)]) == 2
    out = capsys.readouterr().out
    assert "first bad height:" in out
    assert int(out.strip().split()[-1]) <= 7


def test_verify_chain_wrong_secret(tmp_path):
    cli.main(["run-convergence", "--out", str(tmp_path), "--requests", "3"])
    chain = tmp_path / "chains" / "sora.chain"
    assert cli.main(["verify-chain", str(chain), "--secret", "other"]) == 2


def test_project_scale_from_measured(tmp_path, capsys):
    assert cli.main(["run-perf", "--sizes", "12,24", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["project-scale", "--agents", "3,6,9", "--from-measured",
                     str(tmp_path / "perf.csv"), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "projection.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("agents,")
    assert [r.split(",")[0] for r in rows[1:]] == ["3", "6", "9"]


def test_project_scale_default_calibration(tmp_path, capsys):
    assert cli.main(["project-scale", "--out", str(tmp_path)]) == 0
    assert "| 9 |" in capsys.readouterr().out


def test_export(tmp_path):
    cli.main(["run-convergence", "--out", str(tmp_path), "--requests", "4"])
    out = tmp_path / "exp"
    assert cli.main(["export", "--chain", str(tmp_path / "chains" / "sora.chain"),
                     "--convergence-csv", str(tmp_path / "convergence.csv"), "--out", str(out)]) == 0
    recs = [json.loads(l) for l in (out / "sora.chain.jsonl").read_text().splitlines()]
    assert recs[0]["height"] == 0 and recs[0]["payload"]["kind"] == "decision"
    assert (out / "report.md").is_file()


def test_ack_escalation(tmp_path, monkeypatch, capsys):
    assert cli.main(["run-convergence", "--out", str(tmp_path)]) == 0
    pending = json.loads((tmp_path / "pending_escalations.json").read_text())
    assert pending, "default scenario should leave an escalation awaiting confirmation"
    chain = tmp_path / "chains" / "sora.chain"
    before = len(cli.read_chain_file(chain))
    monkeypatch.setattr(sys, "stdin", io.StringIO(pending[0]["token"] + "\n"))
    capsys.readouterr()
    assert cli.main(["ack-escalation", "--out", str(tmp_path)]) == 0
    assert '"acknowledgement"' in capsys.readouterr().out
    assert len(cli.read_chain_file(chain)) == before + 1
    assert cli.main(["verify-chain", str(chain)]) == 0
    assert json.loads((tmp_path / "pending_escalations.json").read_text()) == pending[1:]
    monkeypatch.setattr(sys, "stdin", io.StringIO(pending[0]["token"] + "\n"))
    assert cli.main(["ack-escalation", "--out", str(tmp_path)]) == 3


@pytest.mark.parametrize("argv", [
    ["run-convergence", "--bogus"],
    ["frobnicate"],
    [],
    ["run-perf", "--sizes", "a,b"],
    ["run-convergence", "--scenario", "missing.yaml"],
    ["run-convergence", "--scenario", "no-such-scenario"],
    ["verify-chain", "/nonexistent/chain"],
    ["export"],
])
def test_usage_errors(argv, tmp_path, capsys):
    assert cli.main(argv + (["--out", str(tmp_path)] if argv[:1] == ["export"] else [])) == 1
    assert capsys.readouterr().err


def test_runtime_error(tmp_path):
    bad = tmp_path / "policy.yaml"
    bad.write_text("S1: {eps_r: 4}\n")
    assert cli.main(["run-convergence", "--policy", str(bad), "--out", str(tmp_path)]) == 3


def test_console_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "trustgov", "project-scale", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "Scalability projection" in proc.stdout
