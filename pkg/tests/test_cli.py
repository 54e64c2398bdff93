import json

import pytest

from glneck.cli import main
from glneck.config import parse_config
from glneck.domain import read_glf1
from glneck.pipeline import read_csv

CONST = "[domain]\nkind = torus\nn = 16\n[epsilon]\nstart = 0.2\ncount = 2\n[spectral]\nnum_eigs = 6\n"
DEG1 = "[domain]\nkind = disk\nn = 33\n[epsilon]\nstart = 0.2\ncount = 1\n"


@pytest.fixture
def write(tmp_path):
    def _write(text, name="run.ini"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return _write


def test_constant_solve(tmp_path, write):
    out = tmp_path / "c"
    assert main(["solve", "--config", write(CONST), "--out", str(out)]) == 0
    rep = json.loads((out / "energy_000.json").read_text())
    assert rep["total"] == 0.0 and rep["converged"]
    man = json.loads((out / "manifest.json").read_text())
    for path in man["artifacts"]["solve"]:
        assert (out / path).exists()
    assert parse_config(man["config"]) == parse_config(CONST)
    read_glf1(out / "fields/field_000.glf1")


def test_missing_key_exit_2(tmp_path, write, capsys):
    code = main(["solve", "--config", write("[domain]\nkind = disk\n[epsilon]\nstart = 0.2\n"),
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "domain.n" in capsys.readouterr().err


def test_schedule_of_one_matches_solve(tmp_path, write):
    cfg = write(DEG1)
    a, b = tmp_path / "solve", tmp_path / "sweep"
    assert main(["solve", "--config", cfg, "--out", str(a)]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(b)]) == 0
    for name in ("fields/field_000.glf1", "energy_000.json", "config.ini"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_csv(b / "sweep.csv")
    assert len(rows) == 1 and float(rows[0]["epsilon"]) == 0.2


def test_constant_run_no_neck_and_limit_spectrum(tmp_path, write, capsys):
    out = tmp_path / "c"
    assert main(["sweep", "--config", write(CONST), "--out", str(out)]) == 0
    assert main(["neck", "--out", str(out)]) == 0
    assert "no-neck" in capsys.readouterr().out
    assert json.loads((out / "neck/summary.json").read_text())["status"] == "no-neck"
    assert main(["spectrum", "--out", str(out), "--weight", "limit_sigma"]) == 0
    rows = read_csv(out / "spectrum/index.csv")
    assert len(rows) == 2
    # tangent space of S^2 at a point: two null directions
    assert all(r["ind_gl"] == "0" and r["null_gl"] == "2" for r in rows)
    assert main(["spectrum", "--out", str(out), "--weight", "limit_sigma", "--num-eigs", "0"]) == 2
    # neck_k weight needs neck records
    assert main(["spectrum", "--out", str(out)]) == 2


def test_eta_beyond_domain(tmp_path, write, capsys):
    out = tmp_path / "d"
    assert main(["sweep", "--config", write(DEG1), "--out", str(out)]) == 0
    assert main(["neck", "--out", str(out), "--eta", "3"]) == 2
    assert "inradius" in capsys.readouterr().err
    assert main(["neck", "--out", str(out)]) == 0
    rec = json.loads((out / "neck/summary.json").read_text())["records"][0]
    assert rec["eta"] == 0.9 and rec["n_annuli"] >= 1
    assert read_csv(out / "neck/ledger_000.csv")


def test_unknown_suite_and_bad_command(capsys):
    assert main(["verify", "--suite", "nope"]) == 2
    assert main(["frobnicate"]) == 2


def test_threads_env(tmp_path, write, monkeypatch):
    cfg = write(CONST)
    monkeypatch.setenv("GLNECK_THREADS", "zero")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "a")]) == 2
    monkeypatch.setenv("GLNECK_THREADS", "1")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    monkeypatch.delenv("GLNECK_THREADS")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "b/fields/field_000.glf1").read_bytes() == (tmp_path / "c/fields/field_000.glf1").read_bytes()


def test_locked_out_dir(tmp_path, write):
    out = tmp_path / "c"
    out.mkdir()
    (out / ".glneck.lock").write_text("1")
    assert main(["solve", "--config", write(CONST), "--out", str(out)]) == 2


def test_degree1_rerun_byte_identical(tmp_path, write):
    cfg = write(DEG1)
    for d in ("r1", "r2"):
        assert main(["solve", "--config", cfg, "--out", str(tmp_path / d), "--seed", "3"]) == 0
    man = json.loads((tmp_path / "r1/manifest.json").read_text())
    assert "fields/field_000.glf1" in man["artifacts"]["solve"]
    for path in man["artifacts"]["solve"]:
        assert (tmp_path / "r1" / path).read_bytes() == (tmp_path / "r2" / path).read_bytes()


def test_unconverged_exit_1(tmp_path, write):
    cfg = write(DEG1.replace("count = 1", "count = 1\n[solver]\nmax_iter = 1\nnewton_max_steps = 0"))
    out = tmp_path / "u"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 1
    man = json.loads((out / "manifest.json").read_text())
    assert man["stages"]["solve"]["converged"] is False
