"""
Synthetic dental arches, ground-truth derivation and TCATCLOUD v1 file I/O.

File layout:

    TCATCLOUD v1
    n <count> t <teeth>
    x y z nx ny nz label instance        (n lines)
    centroid <class> cx cy cz            (t lines, row t is instance t + 1)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tcatseg import geomkit
from tcatseg.errors import CloudParseError, FormatError, ValidationError

log = logging.getLogger(__name__)

MAGIC = "TCATCLOUD v1"
GINGIVA = 0
MAX_TEETH = 16
NORMAL_TOL = 1e-6
CENTROID_TOL = 1e-9


@dataclass
class LabeledCloud:
    points: np.ndarray  # (n, 3)
    normals: np.ndarray  # (n, 3) unit
    labels: np.ndarray  # (n,) semantic class, 0 = gingiva
    instances: np.ndarray  # (n,) 0 = gingiva, 1..T teeth
    centroid_classes: np.ndarray  # (T,)
    centroids: np.ndarray  # (T, 3), row t belongs to instance t + 1

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def n_teeth(self) -> int:
        return int(self.centroids.shape[0])

    def validate(self) -> None:
        n = self.n
        for name in ("points", "normals"):
            arr = getattr(self, name)
            if arr.shape != (n, 3):
                raise ValidationError(f"{name} must be ({n}, 3), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contain non-finite values")
        if self.labels.shape != (n,) or self.instances.shape != (n,):
            raise ValidationError("labels and instances must have one entry per point")
        lengths = np.sqrt((self.normals**2).sum(axis=1))
        if n and np.max(np.abs(lengths - 1.0)) > NORMAL_TOL:
            raise ValidationError("normals are not unit length")
        if np.any(self.labels < 0) or np.any(self.instances < 0):
            raise ValidationError("negative label or instance id")
        if self.centroids.shape != (self.n_teeth, 3) or self.centroid_classes.shape != (
            self.n_teeth,
        ):
            raise ValidationError("centroid table is malformed")
        if np.any(self.instances > self.n_teeth):
            raise ValidationError("instance id without a centroid row")
        for t in range(self.n_teeth):
            members = self.instances == t + 1
            if not members.any():
                raise ValidationError(f"centroid row {t} has no points")
            if np.any(self.labels[members] != self.centroid_classes[t]):
                raise ValidationError(f"instance {t + 1} mixes semantic labels")
            if np.max(np.abs(self.points[members].mean(axis=0) - self.centroids[t])) > CENTROID_TOL:
                raise ValidationError(f"centroid of instance {t + 1} is not its points' mean")

    def take(self, indices: np.ndarray) -> LabeledCloud:
        """Subset (or duplicate) points and rebuild the centroid table."""
        idx = np.asarray(indices, dtype=np.int64)
        return with_centroids(
            self.points[idx], self.normals[idx], self.labels[idx], self.instances[idx]
        )


def with_centroids(
    points: np.ndarray, normals: np.ndarray, labels: np.ndarray, instances: np.ndarray
) -> LabeledCloud:
    """Renumber tooth instances 1..T by increasing old id and compute their centroids."""
    old_ids = np.unique(instances[instances > 0])
    remap = np.zeros(int(instances.max(initial=0)) + 1, dtype=np.int64)
    remap[old_ids] = np.arange(1, len(old_ids) + 1)
    inst = remap[instances]
    classes = np.empty(len(old_ids), dtype=np.int64)
    centroids = np.empty((len(old_ids), 3))
    for t in range(len(old_ids)):
        members = inst == t + 1
        classes[t] = labels[members][0]
        centroids[t] = points[members].mean(axis=0)
    return LabeledCloud(
        points=np.asarray(points, dtype=np.float64),
        normals=np.asarray(normals, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        instances=inst,
        centroid_classes=classes,
        centroids=centroids,
    )


# ----------------------------- synthesis -------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    n_teeth: int = 14
    curvature: float = 0.035  # y = a * x^2, model units are millimetres
    arch_half_width: float = 30.0
    tooth_radius: float = 2.6
    tooth_height: float = 4.0
    jitter: float = 0.05  # radial surface noise, fraction of the tooth radius
    crowding: float = 0.0  # 0..1, tighter spacing and buccal/lingual displacement
    scatter: float = 0.0  # 0..1, uneven gaps between neighbours
    missing: tuple[int, ...] = field(default_factory=tuple)  # 1-based arch positions
    points_per_tooth: int = 160
    gingiva_points: int = 1400
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.n_teeth <= MAX_TEETH:
            raise ValidationError(f"n_teeth must be in 1..{MAX_TEETH}, got {self.n_teeth}")
        if min(self.tooth_radius, self.tooth_height, self.arch_half_width) <= 0:
            raise ValidationError("degenerate radii: tooth and arch sizes must be positive")
        if self.points_per_tooth < 2 or self.gingiva_points < 0:
            raise ValidationError("need at least 2 points per tooth")
        if not 0 <= self.crowding <= 1 or not 0 <= self.scatter <= 1:
            raise ValidationError("crowding and scatter must lie in [0, 1]")
        if self.jitter < 0:
            raise ValidationError("jitter must be non-negative")
        bad = [m for m in self.missing if not 1 <= m <= self.n_teeth]
        if bad:
            raise ValidationError(f"missing positions out of range: {bad}")
        if len(set(self.missing)) >= self.n_teeth:
            raise ValidationError("every tooth is missing")


def _arch_x_at(spec: ArchSpec, fractions: np.ndarray) -> np.ndarray:
    """x positions at the given fractions of the parabola's arc length."""
    xs = np.linspace(-spec.arch_half_width, spec.arch_half_width, 4001)
    slope = 2.0 * spec.curvature * xs
    seg = np.sqrt(1.0 + slope**2)
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (seg[1:] + seg[:-1]) * np.diff(xs))])
    return np.interp(fractions * arc[-1], arc, xs)


def _rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _unit_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    """n directions drawn in antithetic pairs (u, -u) so their mean is the origin."""
    half = rng.normal(size=((n + 1) // 2, 3))
    half /= np.sqrt((half**2).sum(axis=1, keepdims=True))
    return np.concatenate([half, -half])[:n]


def _sample_tooth(
    rng: np.random.Generator,
    center: np.ndarray,
    axes: np.ndarray,
    theta: float,
    count: int,
    jitter: float,
) -> tuple[np.ndarray, np.ndarray]:
    u = _unit_directions(rng, count)
    local_n = u / axes
    local_n /= np.sqrt((local_n**2).sum(axis=1, keepdims=True))
    rot = _rotation_z(theta)
    normals = local_n @ rot.T
    surface = (u * axes) @ rot.T
    if jitter > 0:
        bound = 0.5 * float(axes.min())
        offset = np.clip(rng.normal(scale=jitter * float(axes[0]), size=(count, 1)), -bound, bound)
        surface = surface + offset * normals
    return center + surface, normals


def _sample_gingiva(
    rng: np.random.Generator, spec: ArchSpec, span: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    n = spec.gingiva_points
    frac = rng.uniform(span[0], span[1], size=n)
    x = _arch_x_at(spec, np.clip(frac, 0.0, 1.0))
    y = spec.curvature * x**2
    tangent = np.stack([np.ones_like(x), 2.0 * spec.curvature * x, np.zeros_like(x)], axis=1)
    tangent /= np.sqrt((tangent**2).sum(axis=1, keepdims=True))
    side = np.stack([-tangent[:, 1], tangent[:, 0], np.zeros_like(x)], axis=1)
    up = np.array([0.0, 0.0, 1.0])
    phi = rng.uniform(0.0, math.pi, size=(n, 1))
    normals = np.cos(phi) * side + np.sin(phi) * up
    radius = 1.3 * spec.tooth_radius
    # the band crest touches the crown base
    center = np.stack([x, y, np.full_like(x, -(spec.tooth_height + radius))], axis=1)
    return center + radius * normals, normals


def generate_arch(spec: ArchSpec) -> LabeledCloud:
    """Teeth as jittered ellipsoids along y = a x^2 above a gingiva band; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    t = spec.n_teeth

    gaps = 1.0 + spec.scatter * rng.uniform(-0.6, 0.6, size=t + 1)
    edges = np.cumsum(gaps) / gaps.sum()
    span = 1.0 - 0.15 * spec.crowding
    fractions = 0.5 - span / 2 + span * edges[:-1]
    if t == 1:
        fractions = np.array([0.5])
    xs = _arch_x_at(spec, fractions)
    lateral = spec.crowding * 0.5 * spec.tooth_radius * np.clip(rng.normal(size=t), -1.5, 1.5)

    missing = set(spec.missing)
    points, normals, labels, instances = [], [], [], []
    next_instance = 1
    for k in range(t):
        pos = 2.0 * fractions[k] - 1.0
        radius = spec.tooth_radius * (0.85 + 0.3 * abs(pos))
        axes = np.array([radius, 0.9 * radius, spec.tooth_height])
        theta = math.atan(2.0 * spec.curvature * xs[k])
        center = np.array([xs[k], spec.curvature * xs[k] ** 2 + lateral[k], 0.0])
        p, nrm = _sample_tooth(rng, center, axes, theta, spec.points_per_tooth, spec.jitter)
        if k + 1 in missing:
            continue
        points.append(p)
        normals.append(nrm)
        labels.append(np.full(len(p), k + 1, dtype=np.int64))
        instances.append(np.full(len(p), next_instance, dtype=np.int64))
        next_instance += 1

    if spec.gingiva_points:
        margin = 0.5 / t
        gp, gn = _sample_gingiva(rng, spec, (fractions[0] - margin, fractions[-1] + margin))
        points.append(gp)
        normals.append(gn)
        labels.append(np.full(len(gp), GINGIVA, dtype=np.int64))
        instances.append(np.zeros(len(gp), dtype=np.int64))

    return with_centroids(
        np.concatenate(points),
        np.concatenate(normals),
        np.concatenate(labels),
        np.concatenate(instances),
    )


def wild_spec(base: ArchSpec, rng: np.random.Generator) -> ArchSpec:
    """Draw an irregular arch (crowded, scattered, missing teeth, odd curvature)."""
    n_missing = int(rng.integers(0, min(3, base.n_teeth)))
    missing = tuple(sorted(rng.choice(np.arange(1, base.n_teeth + 1), n_missing, replace=False)))
    return replace(
        base,
        curvature=float(base.curvature * rng.uniform(0.6, 1.6)),
        crowding=float(rng.uniform(0.3, 1.0)),
        scatter=float(rng.uniform(0.2, 0.8)),
        missing=tuple(int(m) for m in missing),
    )


# ----------------------------- ground truth ----------------------------------


def derive_offsets(cloud: LabeledCloud) -> np.ndarray:
    """Vector from each tooth point to its instance centroid; zero on gingiva."""
    inst = cloud.instances
    if np.any(inst < 0) or np.any(inst > cloud.n_teeth):
        raise ValidationError("instance ids do not match the centroid table")
    offsets = np.zeros_like(cloud.points)
    teeth = inst > 0
    offsets[teeth] = cloud.centroids[inst[teeth] - 1] - cloud.points[teeth]
    return offsets


def resample(cloud: LabeledCloud, n_target: int, seed: int = 0) -> LabeledCloud:
    """
    FPS subset of ``n_target`` points in canonical (x, y, z) order. Asking for
    more points than exist duplicates seeded random points, with a warning.
    """
    if cloud.n == 0:
        raise ValidationError("cannot resample an empty cloud")
    if n_target < 1:
        raise ValidationError(f"n_target must be positive, got {n_target}")
    order = geomkit.canonical_order(cloud.points)
    if n_target <= cloud.n:
        picked = geomkit.farthest_point_sample(cloud.points[order], n_target, seed_index=0)
        return cloud.take(order[np.sort(picked)])
    log.warning("resample: upsampling %d -> %d points by duplication", cloud.n, n_target)
    rng = np.random.default_rng(seed)
    extra = np.sort(rng.choice(cloud.n, size=n_target - cloud.n, replace=True))
    return cloud.take(order[np.concatenate([np.arange(cloud.n), extra])])


# ----------------------------- file I/O --------------------------------------


def write_cloud(path: str | Path, cloud: LabeledCloud) -> None:
    lines = [MAGIC, f"n {cloud.n} t {cloud.n_teeth}"]
    for p, nrm, lab, inst in zip(
        cloud.points, cloud.normals, cloud.labels, cloud.instances, strict=True
    ):
        vals = " ".join(repr(float(v)) for v in (*p, *nrm))
        lines.append(f"{vals} {int(lab)} {int(inst)}")
    for cls, c in zip(cloud.centroid_classes, cloud.centroids, strict=True):
        lines.append(f"centroid {int(cls)} " + " ".join(repr(float(v)) for v in c))
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cloud(path: str | Path) -> LabeledCloud:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}")
    if len(lines) < 2:
        raise CloudParseError("missing size line", 2)
    head = lines[1].split()
    if len(head) != 4 or head[0] != "n" or head[2] != "t":
        raise CloudParseError(f"expected 'n <count> t <teeth>', got {lines[1]!r}", 2)
    try:
        n, t = int(head[1]), int(head[3])
    except ValueError as exc:
        raise CloudParseError(f"bad counts in {lines[1]!r}", 2) from exc

    expected = 2 + n + t
    if len(lines) < expected:
        raise CloudParseError(
            f"truncated: expected {expected} lines, last good line is {len(lines)}", len(lines) + 1
        )
    pts = np.empty((n, 6))
    ints = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        no = i + 3
        parts = lines[no - 1].split()
        if len(parts) != 8:
            raise CloudParseError(f"expected 8 fields, got {len(parts)}", no)
        try:
            pts[i] = [float(v) for v in parts[:6]]
            ints[i] = [int(parts[6]), int(parts[7])]
        except ValueError as exc:
            raise CloudParseError(f"unparseable point line {lines[no - 1]!r}", no) from exc

    classes = np.empty(t, dtype=np.int64)
    centroids = np.empty((t, 3))
    for j in range(t):
        no = n + j + 3
        parts = lines[no - 1].split()
        if len(parts) != 5 or parts[0] != "centroid":
            raise CloudParseError(f"expected a centroid line, got {lines[no - 1]!r}", no)
        try:
            classes[j] = int(parts[1])
            centroids[j] = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise CloudParseError(f"unparseable centroid line {lines[no - 1]!r}", no) from exc

    cloud = LabeledCloud(
        points=pts[:, :3].copy(),
        normals=pts[:, 3:].copy(),
        labels=ints[:, 0].copy(),
        instances=ints[:, 1].copy(),
        centroid_classes=classes,
        centroids=centroids,
    )
    cloud.validate()
    return cloud


def list_clouds(data_dir: str | Path) -> list[Path]:
    return sorted(Path(data_dir).glob("*.tcat"))
