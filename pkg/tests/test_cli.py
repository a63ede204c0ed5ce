import json
import subprocess
import sys

import pytest

from syncloc.cli import main, read_config
from syncloc.harness import generate_program
from syncloc.isa import format_program, parse_program

PROG = """core 0:
    LI r1, 3
    ADD r2, r1, r1
    ST SHARED[0], r2
    SYNC 1
    HALT
core 1:
    SYNC 1
    LD r1, SHARED[0]
    ST PRIV[0], r1
    HALT
"""


@pytest.fixture
def prog_file(tmp_path):
    path = tmp_path / "prog.txt"
    path.write_text(PROG)
    return path


def test_gen_round_trips(tmp_path, capsys):
    out = tmp_path / "g.txt"
    assert main(["gen", "--cores", "2", "--instrs", "30", "--seed", "3", "-o", str(out)]) == 0
    assert parse_program(out.read_text()).cores == generate_program(2, 30, 50, 3).cores


def test_gen_racy_header(capsys):
    assert main(["gen", "--racy", "--cores", "2", "--instrs", "30"]) == 0
    assert capsys.readouterr().out.startswith("# injected")


def test_locate_clean_exit_zero(prog_file, capsys):
    assert main(["locate", str(prog_file)]) == 0
    assert "verdict: CLEAN" in capsys.readouterr().out


def test_locate_error_triggered_json(prog_file, capsys):
    assert main(["locate", str(prog_file), "--fault", "wrong_result:0:0:2", "--json"]) == 3
    record = json.loads(capsys.readouterr().out)
    assert record["kind"] == "ERROR_TRIGGERED"
    assert record["culprit"]["core"] == 0 and record["culprit"]["pc"] == 0
    assert record["executed_instructions"] > 0


def test_locate_config_file(prog_file, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# fault\nfault.kind = WRONG_RESULT\nfault.core = 0\nfault.pc = 1\n"
                   "fault.delta = 5\nsched.seed = 4\nsched.quantum_max = 2\n")
    assert read_config(cfg)["fault.pc"] == "1"
    assert main(["locate", str(prog_file), "--config", str(cfg), "--json"]) == 3
    assert json.loads(capsys.readouterr().out)["culprit"]["pc"] == 1


def test_locate_data_race_exit_two(tmp_path, capsys):
    path = tmp_path / "race.txt"
    path.write_text("core 0:\n LI r1, 1\n LI r2, 1\n LI r3, 1\n LI r4, 1\n ST SHARED[0], r1\n HALT\n"
                    "core 1:\n LI r1, 2\n ST SHARED[0], r1\n HALT\n")
    assert main(["locate", str(path), "--seed", "0", "--quantum-max", "2"]) == 2
    assert "WAW" in capsys.readouterr().out


def test_locate_bad_fault_is_internal_error(prog_file, capsys):
    assert main(["locate", str(prog_file), "--fault", "branch_flip:0:0"]) == 1
    assert "FAULT_TARGET_MISMATCH" in capsys.readouterr().err


def test_store_and_diff(prog_file, tmp_path, capsys):
    store = tmp_path / "store"
    main(["locate", str(prog_file), "--fault", "wrong_result:0:0:2", "--store", str(store)])
    capsys.readouterr()
    assert main(["diff", "--store", str(store), "MACHINE:1:1", "MODEL:1:1"]) == 0
    text = capsys.readouterr().out
    assert "SHARED[0:1)" in text and "machine=[10] model=[6]" in text
    assert main(["diff", "--store", str(store), "--json", "MODEL:1:1", "MODEL:1:1"]) == 0
    assert json.loads(capsys.readouterr().out) == []
    assert main(["diff", "--store", str(store), "MODEL:7:1", "MODEL:1:1"]) == 1


def test_dump_graph(prog_file, capsys):
    assert main(["dump-graph", str(prog_file)]) == 0
    out = capsys.readouterr().out
    assert '"c0.0" -> "c1.1"' in out


def test_experiment_json_is_reproducible(tmp_path, capsys):
    args = ["experiment", "--cores", "2", "--instrs", "40", "--trials", "2", "--seed", "5"]
    assert main(args + ["-o", str(tmp_path / "a.json")]) == 0
    assert main(args + ["-o", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert "cores" in capsys.readouterr().out


def test_console_script_entry_point(prog_file):
    proc = subprocess.run([sys.executable, "-m", "syncloc.cli", "locate", str(prog_file)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "CLEAN" in proc.stdout
