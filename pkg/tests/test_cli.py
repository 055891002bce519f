"""Command-line subcommands, their output files and their exit codes."""

import csv
import subprocess
import sys

import numpy as np
import pytest

from mergesim import cli
from mergesim.fd import REFERENCE_FD, TriangularFD, synthetic_samples

FAST = ["--set", "scenario.horizon=600", "--set", "scenario.seeds=1-2", "--jobs", "1"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fit_fd(tmp_path, capsys):
    samples = synthetic_samples(REFERENCE_FD, per_leg=20, noise=0.01, rng=np.random.default_rng(1))
    src = tmp_path / "samples.csv"
    src.write_text("density,flow\n" + "".join(f"{s.density!r},{s.flow!r}\n" for s in samples))
    out = tmp_path / "fd.txt"
    assert cli.main(["fit-fd", "--samples", str(src), "--out", str(out)]) == 0
    fd = TriangularFD.from_record(out.read_text())
    assert fd.v == pytest.approx(21.0, rel=0.05)
    assert "v=" in capsys.readouterr().out


def test_fit_fd_missing_samples(tmp_path, capsys):
    assert cli.main(["fit-fd", "--samples", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 1
    assert "none.csv" in capsys.readouterr().err


def test_run_ctm_zero_demand(tmp_path):
    args = ["run-ctm", "--out", str(tmp_path), "--set", "demand.main_inflow=0", "--set", "demand.merge_inflow=0"]
    assert cli.main(args) == 0
    (row,) = read_rows(tmp_path / "summary.csv")
    assert float(row["outflow"]) == float(row["avg_speed"]) == float(row["accepted_inflow"]) == 0.0
    assert (tmp_path / "config.ini").is_file()
    assert (tmp_path / "aggregate.csv").is_file()


def test_run_ctm_trace(tmp_path):
    assert cli.main(["run-ctm", "--out", str(tmp_path), "--trace"]) == 0
    lines = (tmp_path / "ctm_trace.csv").read_text().splitlines()
    assert lines[0].startswith("step,cell")
    assert len(lines) > 7


def test_missing_config_exit_code(tmp_path, capsys):
    assert cli.main(["run-ctm", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 1
    assert "nope.ini" in capsys.readouterr().err


def test_bad_override_exit_code(tmp_path):
    assert cli.main(["run-ctm", "--set", "demand.bogus=1", "--out", str(tmp_path)]) == 1


def test_print_config(tmp_path, capsys):
    assert cli.main(["run-ctm", "--print-config", "--set", "demand.avp=30", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "[ctm]" in text and "avp = 30" in text
    assert not (tmp_path / "summary.csv").exists()


def test_out_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["run-ctm"]) == 0
    assert (tmp_path / "envout" / "summary.csv").is_file()


def test_microsim_outputs_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["run-microsim", "--out", str(tmp_path / name)] + FAST) == 0
    for f in ("summary.csv", "aggregate.csv", "config.ini"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(read_rows(tmp_path / "a" / "summary.csv")) == 2


def test_microsim_detailed_outputs(tmp_path):
    args = ["run-microsim", "--out", str(tmp_path), "--events", "--profile", "60", "--trace-av"]
    args += FAST + ["--set", "scenario.policy=heuristic_av", "--set", "demand.avp=20"]
    assert cli.main(args) == 0
    for stem in ("events", "profile", "av_trace"):
        assert (tmp_path / f"{stem}_seed1.csv").is_file()
        assert (tmp_path / f"{stem}_seed2.csv").is_file()


def test_sweep_ctm(tmp_path):
    args = ["sweep", "--out", str(tmp_path), "--set", "scenario.engine=ctm", "--set", "sweep.main=1400,1500"]
    assert cli.main(args + ["--set", "sweep.merge=200"]) == 0
    rows = read_rows(tmp_path / "aggregate.csv")
    assert len(rows) == 2


def test_nonconvergence_exit_code(tmp_path):
    assert cli.main(["run-ctm", "--out", str(tmp_path), "--set", "ctm.max_steps=60"]) == 3


def test_jobs_must_be_positive(tmp_path):
    assert cli.main(["run-microsim", "--jobs", "0", "--out", str(tmp_path)]) == 1


def test_help_lists_flags():
    proc = subprocess.run(
        [sys.executable, "-m", "mergesim.cli", "run-microsim", "--help"], capture_output=True, text=True, check=True
    )
    for flag in ("--config", "--set", "--out", "--print-config", "--jobs", "--events", "--profile", "--trace-av"):
        assert flag in proc.stdout
