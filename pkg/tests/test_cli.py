"""Command-line behaviour and exit codes."""
from __future__ import annotations

import json

import pytest

from shadowlab import __version__, workloads
from shadowlab.asmfmt import loads_canonical, parse_program
from shadowlab.cli import main


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["run", "fib", "--map", "sideways"]) == 2
    assert main(["run", "fib", "--validate", "cmp"]) == 2
    assert main(["run", "no-such-thing"]) == 2
    assert "no such program" in capsys.readouterr().err


def test_asm_disasm_fixed_point(tmp_path):
    src = write(tmp_path, "fib.msa", workloads.source("fib"))
    blob = str(tmp_path / "fib.json")
    text = str(tmp_path / "fib2.msa")
    assert main(["asm", src, "-o", blob]) == 0
    assert main(["disasm", blob, "-o", text]) == 0
    again = str(tmp_path / "again.json")
    assert main(["asm", text, "-o", again]) == 0
    assert open(blob).read() == open(again).read()
    assert loads_canonical(open(blob).read()) == workloads.workload("fib")


def test_parse_error_reports_line(tmp_path, capsys):
    src = write(tmp_path, "bad.msa", ".entry main\n.func main\n    jmp nowhere\n")
    assert main(["asm", src]) == 2
    assert "nowhere (line 3)" in capsys.readouterr().err


def test_instrument_prints_reassemblable_text(tmp_path, capsys):
    src = write(tmp_path, "fib.msa", workloads.source("fib"))
    assert main(["instrument", src, "--map", "compact-segment", "--validate", "lbp", "--annotate"]) == 0
    out = capsys.readouterr()
    assert "; prologue" in out.out and "fib: +" in out.err
    parse_program(out.out)


def test_instrument_needs_a_mapping(tmp_path):
    src = write(tmp_path, "fib.msa", workloads.source("fib"))
    assert main(["instrument", src]) == 2


def test_run_clean_json(capsys):
    assert main(["run", "fib", "--size", "6", "--map", "parallel-register", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["schema"] == "shadowlab-report"
    run = doc["sections"][0]
    assert run["rows"][0][1] == "clean"
    assert "thread 0 output: 8" in run["notes"]


def test_run_writes_trace(tmp_path):
    trace = tmp_path / "t.csv"
    assert main(["run", "fib", "--size", "3", "--trace", str(trace), "-o", str(tmp_path / "r.txt")]) == 0
    lines = trace.read_text().splitlines()
    assert lines and lines[0].startswith("0,0,")


@pytest.mark.parametrize("argv, code", [
    (["run", "rop_victim", "--attack", "rop_chain"], 3),
    (["run", "rop_victim", "--attack", "rop_chain", "--map", "compact-register"], 1),
    (["run", "rop_victim", "--attack", "stack_pivot", "--map", "parallel-constant",
      "--validate", "fault"], 1),
    (["run", "rop_victim", "--attack", "shadow_overwrite", "--map", "compact-register",
      "--integrity", "key"], 1),
    (["run", "rop_victim", "--attack", "shadow_overwrite", "--map", "compact-register",
      "--integrity", "info-hiding"], 3),
])
def test_attack_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_fault_and_layout_exit_codes(tmp_path, capsys):
    src = write(tmp_path, "boom.msa", ".entry main\n.func main\n    mov g1, 0x10\n    mov g1, [g1]\n    ret\n")
    assert main(["run", src]) == 14
    assert main(["run", "threads", "--map", "parallel-constant"]) == 16
    assert main(["run", "threads", "--map", "compact-global", "--validate", "cmp"]) == 15


def test_seed_from_environment(monkeypatch, capsys):
    monkeypatch.setenv("SHADOWLAB_SEED", "nope")
    assert main(["run", "fib", "--size", "3"]) == 2
    monkeypatch.setenv("SHADOWLAB_SEED", "5")
    assert main(["run", "fib", "--size", "3", "--map", "compact-register", "--integrity",
                 "info-hiding"]) == 0


def test_matrix_command(capsys):
    assert main(["matrix", "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert "compact-register,✓,✓,✦" in out
    assert "parallel-register,✦,✓,✓" in out


def test_sweep_command(tmp_path, capsys):
    cfg = write(tmp_path, "s.cfg", "mappings = compact-register\nvalidations = cmp\nintegrity = none\n"
                                   "attacks = rop_chain\ncompat = no\nbreakdown = no\n")
    assert main(["sweep", cfg, "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["sections"]
    bad = write(tmp_path, "bad.cfg", "colour = red\n")
    assert main(["sweep", bad]) == 2
