from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pandas as pd
import pytest

import tcatseg.cli as cli
from tcatseg.metrics import METRIC_KEYS

ROOT = Path(__file__).resolve().parents[1]
SMALL_MODEL = [
    "--n-input", "256",
    "--levels", "2",
    "--widths", "8,16",
    "--radii", "0.2,0.4",
    "--k-neighbors", "8",
]  # fmt: skip


def _run(*args: str) -> subprocess.CompletedProcess[str]:
    return subprocess.run(
        [sys.executable, "-m", "tcatseg", "-q", *args],
        cwd=ROOT,
        capture_output=True,
        text=True,
    )


def _synth(out: Path, *extra: str) -> None:
    code = cli.main(
        ["-q", "synth", "--out", str(out), "--points-per-tooth", "40", "--gingiva-points", "120"]
        + list(extra)
    )
    assert code == cli.EXIT_OK


def test_synth_writes_clouds_and_manifest(tmp_path: Path) -> None:
    result = _run("synth", "--out", str(tmp_path / "a"), "--teeth", "14", "--count", "8")
    assert result.returncode == 0, result.stderr
    assert "Wrote 8 clouds + manifest" in result.stdout
    files = sorted(p.name for p in (tmp_path / "a").glob("*.tcat"))
    assert files == [f"arch_{i:03d}.tcat" for i in range(8)]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["count"] == 8
    assert [e["seed"] for e in manifest["files"]] == list(range(8))
    assert all(e["teeth"] == 14 for e in manifest["files"])


def test_synth_is_deterministic(tmp_path: Path) -> None:
    _synth(tmp_path / "a", "--count", "2", "--seed", "5", "--wild")
    _synth(tmp_path / "b", "--count", "2", "--seed", "5", "--wild")
    for name in ("arch_000.tcat", "arch_001.tcat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_arguments_exit_2(tmp_path: Path) -> None:
    assert _run("synth", "--out", str(tmp_path), "--teeth", "0").returncode == 2
    assert cli.main(["-q", "synth", "--out", str(tmp_path), "--count", "0"]) == cli.EXIT_USAGE
    code = cli.main(["-q", "eval", "--data", str(tmp_path), "--out", str(tmp_path / "e")])
    assert code == cli.EXIT_USAGE
    missing = str(tmp_path / "nope.tcat")
    args = ["-q", "eval", "--data", str(tmp_path), "--out", str(tmp_path), "--checkpoint"]
    assert cli.main([*args, missing]) == cli.EXIT_USAGE


def test_eval_oracle_scores_100(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    data_dir, out = tmp_path / "data", tmp_path / "eval"
    _synth(data_dir, "--count", "3", "--missing", "4")
    assert cli.main(["-q", "eval", "--data", str(data_dir), "--out", str(out), "--oracle"]) == 0
    printed = capsys.readouterr().out
    aggregate = (out / "aggregate.txt").read_text(encoding="utf-8")
    assert printed == aggregate
    for key in METRIC_KEYS:
        assert f"{key} = 100.00" in aggregate.splitlines()
    table = pd.read_csv(out / "per_file.csv")
    assert list(table.columns) == ["file", *METRIC_KEYS]
    assert len(table) == 3
    assert (table[list(METRIC_KEYS)] == 1.0).all().all()
    assert "Oracle self-test" in (out / "report.md").read_text(encoding="utf-8")


def test_train_eval_dump_round_trip(tmp_path: Path) -> None:
    data_dir, run, scored = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    _synth(data_dir, "--count", "2", "--teeth", "6")
    code = cli.main(
        ["-q", "train", "--data", str(data_dir), "--out", str(run), "--epochs", "0", *SMALL_MODEL]
    )
    assert code == 0
    assert (run / "loss.log").read_text(encoding="utf-8") == "# epoch seg tcp offset total lr\n"
    assert "widths = 8,16" in (run / "model.cfg").read_text(encoding="utf-8")
    ckpt = run / "model.tcat"

    # model.cfg next to the checkpoint supplies the architecture
    code = cli.main(
        ["-q", "eval", "--data", str(data_dir), "--out", str(scored), "--checkpoint", str(ckpt)]
    )
    assert code == 0
    assert sorted(p.name for p in (scored / "tcp").iterdir()) == ["arch_000.tcp", "arch_001.tcp"]
    table = pd.read_csv(scored / "per_file.csv")
    assert table[list(METRIC_KEYS)].ge(0.0).all().all()
    assert table[list(METRIC_KEYS)].le(1.0).all().all()

    dump = tmp_path / "dump.tcp"
    code = cli.main(
        [
            "-q", "dump-tcp",
            "--checkpoint", str(ckpt),
            "--input", str(data_dir / "arch_000.tcat"),
            "--out", str(dump),
        ]  # fmt: skip
    )
    assert code == 0
    lines = dump.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# level index x y z"
    assert len(lines) == 1 + 2 * 16
    assert [ln.split()[0] for ln in lines[1:]] == ["1"] * 16 + ["2"] * 16

    # explicit overrides beat model.cfg, and a shape mismatch is a usage error
    code = cli.main(
        [
            "-q", "eval",
            "--data", str(data_dir),
            "--out", str(scored),
            "--checkpoint", str(ckpt),
            "--widths", "8,32",
        ]  # fmt: skip
    )
    assert code == cli.EXIT_USAGE


def test_grad_check_detects_corrupted_rule(capsys: pytest.CaptureFixture[str]) -> None:
    code = cli.main(
        ["-q", "grad-check", "--corrupt-op", "sigmoid", "--trials", "2", "--entries", "1"]
    )
    assert code == cli.EXIT_CHECK_FAILED
    out = capsys.readouterr().out
    assert "FAILED groups:" in out
    assert "op.sigmoid" in out.splitlines()[-1]


def test_grad_check_passes_with_defaults(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli.main(["-q", "grad-check"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "model." in out


@pytest.mark.parametrize("teeth", ["1", "2"])
def test_synth_wild_short_arches(tmp_path: Path, teeth: str) -> None:
    for seed in range(5):
        out = tmp_path / f"s{seed}"
        _synth(out, "--teeth", teeth, "--wild", "--count", "3", "--seed", str(seed))
        assert len(list(out.glob("*.tcat"))) == 3


def test_train_and_eval_are_byte_deterministic(tmp_path: Path) -> None:
    data_dir = tmp_path / "data"
    _synth(data_dir, "--count", "2", "--teeth", "6", "--crowding", "0.5")
    for tag in ("a", "b"):
        run, scored = tmp_path / f"run_{tag}", tmp_path / f"eval_{tag}"
        train = ["-q", "train", "--data", str(data_dir), "--out", str(run), "--epochs", "2"]
        assert cli.main([*train, *SMALL_MODEL]) == cli.EXIT_OK
        evaluate = ["-q", "eval", "--data", str(data_dir), "--out", str(scored)]
        assert cli.main([*evaluate, "--checkpoint", str(run / "model.tcat")]) == cli.EXIT_OK

    for rel in ("model.tcat", "best.tcat", "loss.log"):
        assert (tmp_path / "run_a" / rel).read_bytes() == (tmp_path / "run_b" / rel).read_bytes()
    for rel in ("per_file.csv", "aggregate.txt"):
        assert (tmp_path / "eval_a" / rel).read_bytes() == (tmp_path / "eval_b" / rel).read_bytes()
    assert len((tmp_path / "run_a" / "loss.log").read_text(encoding="utf-8").splitlines()) == 3
