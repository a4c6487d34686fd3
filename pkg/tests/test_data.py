from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import tcatseg.data as data
from tcatseg.errors import CloudParseError, FormatError, ValidationError


def test_generate_arch_is_consistent() -> None:
    spec = data.ArchSpec(n_teeth=8, points_per_tooth=40, gingiva_points=100, seed=3)
    cloud = data.generate_arch(spec)
    cloud.validate()
    assert cloud.n == 8 * 40 + 100
    assert cloud.n_teeth == 8
    assert sorted(np.unique(cloud.labels).tolist()) == list(range(9))
    assert cloud.centroid_classes.tolist() == list(range(1, 9))
    assert np.allclose(np.sqrt((cloud.normals**2).sum(axis=1)), 1.0, atol=1e-12)


def test_generate_arch_is_deterministic() -> None:
    spec = data.ArchSpec(n_teeth=5, points_per_tooth=30, gingiva_points=50, seed=9)
    a, b = data.generate_arch(spec), data.generate_arch(spec)
    assert a.points.tobytes() == b.points.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = data.generate_arch(replace(spec, seed=10))
    assert not np.array_equal(a.points, c.points)


def test_missing_teeth_keep_arch_positions() -> None:
    full = data.generate_arch(data.ArchSpec(n_teeth=6, points_per_tooth=20, gingiva_points=0))
    gap = data.generate_arch(
        data.ArchSpec(n_teeth=6, points_per_tooth=20, gingiva_points=0, missing=(2, 5))
    )
    gap.validate()
    assert gap.n_teeth == 4
    assert gap.centroid_classes.tolist() == [1, 3, 4, 6]
    assert gap.instances.max() == 4
    # the remaining teeth sit exactly where they do in the full arch
    assert np.allclose(gap.centroids, full.centroids[[0, 2, 3, 5]])


def test_arch_spec_validation() -> None:
    for bad in (
        data.ArchSpec(n_teeth=0),
        data.ArchSpec(n_teeth=17),
        data.ArchSpec(tooth_radius=0.0),
        data.ArchSpec(crowding=1.5),
        data.ArchSpec(n_teeth=3, missing=(4,)),
        data.ArchSpec(n_teeth=2, missing=(1, 2)),
    ):
        with pytest.raises(ValidationError):
            data.generate_arch(bad)


def test_wild_spec_draws_irregular_arches() -> None:
    rng = np.random.default_rng(0)
    base = data.ArchSpec(points_per_tooth=20, gingiva_points=50)
    for _ in range(10):
        spec = data.wild_spec(base, rng)
        assert 0.3 <= spec.crowding <= 1.0
        assert len(spec.missing) <= 2
        data.generate_arch(spec).validate()


@pytest.mark.parametrize("teeth", [1, 2, 3])
def test_wild_spec_on_short_arches(teeth: int) -> None:
    rng = np.random.default_rng(teeth)
    base = data.ArchSpec(n_teeth=teeth, points_per_tooth=10, gingiva_points=20)
    for _ in range(20):
        spec = data.wild_spec(base, rng)
        assert len(spec.missing) < teeth
        assert data.generate_arch(spec).n_teeth == teeth - len(spec.missing)


def test_derive_offsets(arch: data.LabeledCloud) -> None:
    offsets = data.derive_offsets(arch)
    gingiva = arch.instances == 0
    assert np.array_equal(offsets[gingiva], np.zeros((gingiva.sum(), 3)))
    moved = arch.points + offsets
    for t in range(arch.n_teeth):
        members = arch.instances == t + 1
        assert np.allclose(moved[members], arch.centroids[t])


def test_resample_down_and_up(arch: data.LabeledCloud) -> None:
    down = data.resample(arch, 200, seed=0)
    down.validate()
    assert down.n == 200
    assert len(np.unique(down.points, axis=0)) == 200
    assert np.array_equal(data.resample(arch, 200, seed=0).points, down.points)

    up = data.resample(arch, arch.n + 40, seed=1)
    up.validate()
    assert up.n == arch.n + 40


def test_write_read_round_trip(tmp_path: Path, arch: data.LabeledCloud) -> None:
    path = tmp_path / "a.tcat"
    data.write_cloud(path, arch)
    assert path.read_text(encoding="utf-8").startswith("TCATCLOUD v1\n")
    back = data.read_cloud(path)
    assert back.points.tobytes() == arch.points.tobytes()
    assert back.normals.tobytes() == arch.normals.tobytes()
    assert np.array_equal(back.labels, arch.labels)
    assert np.array_equal(back.instances, arch.instances)
    assert back.centroids.tobytes() == arch.centroids.tobytes()
    assert data.list_clouds(tmp_path) == [path]


def test_read_rejects_bad_magic(tmp_path: Path) -> None:
    path = tmp_path / "x.tcat"
    path.write_text("PLY\n", encoding="utf-8")
    with pytest.raises(FormatError):
        data.read_cloud(path)


def test_read_reports_truncation(tmp_path: Path, arch: data.LabeledCloud) -> None:
    path = tmp_path / "a.tcat"
    data.write_cloud(path, arch)
    lines = path.read_text(encoding="utf-8").splitlines()
    path.write_text("\n".join(lines[:50]) + "\n", encoding="utf-8")
    with pytest.raises(CloudParseError, match="last good line is 50") as info:
        data.read_cloud(path)
    assert info.value.line_no == 51


def test_read_reports_bad_line(tmp_path: Path, arch: data.LabeledCloud) -> None:
    path = tmp_path / "a.tcat"
    data.write_cloud(path, arch)
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[6] = "1.0 2.0 oops 0 0 1 0 0"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(CloudParseError) as info:
        data.read_cloud(path)
    assert info.value.line_no == 7


def test_read_rejects_nan(tmp_path: Path, arch: data.LabeledCloud) -> None:
    path = tmp_path / "a.tcat"
    data.write_cloud(path, arch)
    lines = path.read_text(encoding="utf-8").splitlines()
    fields = lines[2].split()
    fields[0] = "nan"
    lines[2] = " ".join(fields)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="non-finite"):
        data.read_cloud(path)


def test_validate_catches_inconsistent_centroids(arch: data.LabeledCloud) -> None:
    arch.centroids[0] += 0.01
    with pytest.raises(ValidationError, match="centroid"):
        arch.validate()
