import pytest

from helpers import LISTINGS
from tilesched.cli import EXIT_ERROR, EXIT_FAIL, EXIT_PASS, format_matrix, main, read_matrix

L2 = str(LISTINGS / "listing2.fi")


def test_verify_listing2(capsys):
    assert main(["verify", L2, "--seed", "7"]) == EXIT_PASS
    out = capsys.readouterr().out.splitlines()
    assert out == ["PASS", "max abs error: 0 (tolerance 0)", "races: no races", "ownership: ownership clean"]


def test_verify_float_inputs(capsys):
    assert main(["verify", L2, "--float", "--k", "16"]) == EXIT_PASS
    assert "tolerance 0.001" in capsys.readouterr().out


def test_verify_fails_on_race(tmp_path, capsys):
    text = (LISTINGS / "listing2.fi").read_text().replace("  done\n}\ntile 64 32", "  done\n} .noSync\ntile 64 32")
    assert ".noSync" in text
    path = tmp_path / "nosync.fi"
    path.write_text(text)
    assert main(["verify", str(path)]) == EXIT_FAIL
    out = capsys.readouterr().out
    assert out.startswith("FAIL\n") and "A_SH_3" in out


def test_elaborate(capsys):
    assert main(["elaborate", L2]) == EXIT_PASS
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "MatMul(128,128,32)(GL,GL,GL)(Kernel)"
    assert lines[-1] == "MatMul(1,1,1)(RF,RF,RF)(Thread)"
    assert main(["elaborate", L2, "--nested", "--labels"]) == EXIT_PASS
    out = capsys.readouterr().out
    assert "[store]" in out and "load(A,SH)" in out


def test_elaborate_listing1_matches_golden(capsys):
    assert main(["elaborate", str(LISTINGS / "listing1.fi")]) == EXIT_PASS
    golden = (LISTINGS.parent / "tests" / "golden" / "listing1_trace.txt").read_text()
    assert capsys.readouterr().out == golden


def test_codegen_to_file(tmp_path, capsys):
    out = tmp_path / "k.cu"
    assert main(["codegen", L2, "--out", str(out)]) == EXIT_PASS
    assert capsys.readouterr().out == ""
    assert "__global__" in out.read_text()


def test_codegen_capacity_error(capsys):
    assert main(["codegen", str(LISTINGS / "listing1.fi")]) == EXIT_ERROR
    assert "CapacityError" in capsys.readouterr().err


def test_hmma_codegen_only(capsys):
    hmma = str(LISTINGS / "hmma.fi")
    assert main(["codegen", hmma]) == EXIT_PASS
    assert "asm volatile" in capsys.readouterr().out
    assert main(["simulate", hmma]) == EXIT_ERROR
    assert "UnsimulatableResidual" in capsys.readouterr().err


def test_simulate_digest_is_deterministic(capsys, tmp_path):
    log = tmp_path / "log.txt"
    assert main(["simulate", L2, "--k", "8", "--seed", "3", "--dump-log", str(log)]) == EXIT_PASS
    first = capsys.readouterr().out
    assert main(["simulate", L2, "--k", "8", "--seed", "3"]) == EXIT_PASS
    assert capsys.readouterr().out == first
    assert first.startswith("digest: ") and log.read_text()


def test_matrix_files(tmp_path, capsys):
    a = [[float(r + c) for c in range(8)] for r in range(128)]
    b = [[float(r - c) for c in range(128)] for r in range(8)]
    (tmp_path / "a.txt").write_text(format_matrix(a))
    (tmp_path / "b.txt").write_text(format_matrix(b))
    assert read_matrix(tmp_path / "a.txt") == a
    out = tmp_path / "c.txt"
    args = ["--k", "8", "--a", str(tmp_path / "a.txt"), "--b", str(tmp_path / "b.txt")]
    assert main(["simulate", L2, *args, "--out", str(out)]) == EXIT_PASS
    c = read_matrix(out)
    assert c[5][7] == sum(a[5][p] * b[p][7] for p in range(8))
    assert main(["verify", L2, *args]) == EXIT_PASS


def test_bad_matrix_file(tmp_path, capsys):
    bad = tmp_path / "a.txt"
    bad.write_text("2 2\n1 2 3\n")
    assert main(["verify", L2, "--a", str(bad)]) == EXIT_ERROR
    assert "expected 4 values" in capsys.readouterr().err


def test_error_locations(tmp_path, capsys):
    assert main(["verify", L2, "--m", "100"]) == EXIT_ERROR
    assert capsys.readouterr().err.startswith(f"{L2}:3: NonDivisible")
    broken = tmp_path / "broken.fi"
    broken.write_text("spec matmul 8 8 8\ntile 2 x\ndone\n")
    assert main(["elaborate", str(broken)]) == EXIT_ERROR
    assert capsys.readouterr().err.startswith(f"{broken}:2:8: ")


def test_missing_file(capsys):
    assert main(["elaborate", "/nonexistent.fi"]) == EXIT_ERROR
    assert capsys.readouterr().err.startswith("error: ")


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
