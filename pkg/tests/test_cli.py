import json

import pytest

from ropwatch import corpus
from ropwatch.cli import main
from ropwatch.indicators import gap_analyze, parity_analyze
from ropwatch.traceio import read_trace
from ropwatch.vm import run


@pytest.fixture
def cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("ROPWATCH_SEED", raising=False)
    return tmp_path


def test_run_then_analyze_matches_in_process(cwd, vuln):
    (cwd / "in.txt").write_text("3, 10 0x14\n30\n")
    assert main(["run", "--input", "in.txt", "--out", "t.jsonl"]) == 0
    rec = run(vuln, [3, 10, 20, 30])
    assert tuple(read_trace("t.jsonl")) == rec.events
    for ind, fn in (("parity", parity_analyze), ("gap", gap_analyze)):
        assert main(["analyze", "--trace", "t.jsonl", "--indicator", ind, "--out", "v.json"]) == 0
        expected = [v.to_json() for v in fn(rec.events).values()]
        assert json.loads((cwd / "v.json").read_text()) == expected


def test_exploit_analyze_alerts(cwd):
    assert main(["exploit", "--out", "x.jsonl", "--padding", "26"]) == 0
    assert main(["analyze", "--trace", "x.jsonl", "--indicator", "parity", "--out", "v.json"]) == 2
    v = json.loads((cwd / "v.json").read_text())
    assert v[0]["alert"] is True and v[0]["indicator"] == "parity"


def test_run_custom_image(cwd):
    (cwd / "p.asm").write_text("main: MOV r0, 4\nCALL lib_put_00\nHALT\nscratch: .word 0\n")
    assert main(["run", "--image", "p.asm", "--out", "t.jsonl"]) == 0
    assert main(["run", "--image", "p.asm", "--no-lib", "--out", "t2.jsonl"]) == 1


def test_scan_and_chains(cwd):
    assert main(["scan", "--segment", "code", "--out", "g.json"]) == 0
    rows = json.loads((cwd / "g.json").read_text())
    assert rows and {"addr", "mnemonics", "text", "effect_sig"} <= set(rows[0])
    assert main(["chains", "--source", "library", "--cap", "3", "--out", "ch"]) == 0
    files = sorted((cwd / "ch").iterdir())
    assert len(files) == 3
    assert main(["exploit", "--chain", str(files[2]), "--out", "x.jsonl"]) == 0
    assert main(["chains", "--jmp", "--out", "jc"]) == 0
    assert main(["exploit", "--chain", "jc/chain-0000.json", "--out", "j.jsonl"]) == 0
    assert main(["analyze", "--trace", "j.jsonl", "--indicator", "gap", "--out", "g.json"]) == 0
    assert main(["analyze", "--trace", "j.jsonl", "--indicator", "parity", "--out", "p.json"]) == 2


def test_analyze_ip_writes_csv(cwd):
    main(["exploit", "--out", "x.jsonl"])
    assert main(["analyze", "--trace", "x.jsonl", "--indicator", "ip", "--window", "32",
                 "--out", "ip.csv"]) == 0
    assert (cwd / "ip.csv").read_text().startswith("window_start_seq,revisit_score,scatter_score\n")


def test_plot_outputs(cwd):
    main(["run", "--out", "t.jsonl"])
    for kind in ("retcall", "gap", "ip", "ipfeat"):
        assert main(["plot", "--trace", "t.jsonl", "--kind", kind, "--window", "16",
                     "--out", f"p-{kind}"]) == 0
        assert (cwd / f"p-{kind}.csv").exists() and (cwd / f"p-{kind}.svg").exists()


def test_eval_and_seed_env(cwd, monkeypatch, capsys):
    args = ["eval", "--legit", "10", "--attacks", "10", "--out"]
    assert main(args + ["a.json", "--paper-shape"]) == 0
    assert "Gadget Source" in capsys.readouterr().out
    monkeypatch.setenv("ROPWATCH_SEED", "0")
    assert main(args + ["b.json"]) == 0
    monkeypatch.setenv("ROPWATCH_SEED", "5")
    assert main(args + ["c.json", "--save-plan", "plan.json"]) == 0
    a, b, c = ((cwd / f).read_bytes() for f in ("a.json", "b.json", "c.json"))
    assert a == b and a != c
    assert main(["eval", "--plan", "plan.json", "--out", "d.json"]) == 0
    assert (cwd / "d.json").read_bytes() == c
    assert main(["eval", "--indicator", "ip", "--out", "e.json"]) == 1


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["analyze", "--bogus"], ["run"]])
def test_usage_errors_exit_one(cwd, argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


@pytest.mark.parametrize("argv", [
    ["analyze", "--trace", "missing.jsonl", "--out", "v"],
    ["run", "--image", "missing.asm", "--out", "t"],
    ["exploit", "--chain", "missing.json", "--out", "t"],
])
def test_runtime_errors_exit_one(cwd, argv):
    assert main(argv) == 1


def test_malformed_trace_reports_line(cwd, capsys):
    (cwd / "bad.jsonl").write_text('{"seq": 0, "tid": 0, "addr": "0x1000", "cls": "RET", "mn": "RET"}\n{oops\n')
    assert main(["analyze", "--trace", "bad.jsonl", "--out", "v.json"]) == 1
    assert "line 2" in capsys.readouterr().err


def test_bad_seed_env(cwd, monkeypatch):
    monkeypatch.setenv("ROPWATCH_SEED", "abc")
    assert main(["eval", "--legit", "2", "--attacks", "2", "--out", "r.json"]) == 1
