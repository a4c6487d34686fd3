"""
Full segmentation model: stem -> TCW encoders (SGDA + DPDA per level) ->
skip-connected decoders -> segmentation and offset heads, plus raw-resolution
label refinement.

All geometry (FPS, ball query, decoder neighbors) depends only on the input
coordinates and is computed once per cloud in a ``GeometryPlan``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tcatseg import diffcore as dc
from tcatseg import geomkit
from tcatseg.attention import PointSet
from tcatseg.checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from tcatseg.data import LabeledCloud, derive_offsets
from tcatseg.dpda import MAX_LEVEL, N_SUPERPOINTS, DPDAParams, Superpoints, dpda_step, init_dpda
from tcatseg.errors import ContractError, SizeError, ValidationError
from tcatseg.sgda import (
    SGDAParams,
    global_branch,
    init_sgda,
    lift_points,
    local_branch,
    sgda_fuse,
)

log = logging.getLogger(__name__)

NORMAL_TOL = 1e-3
DECODER_NEIGHBORS = 3
REFINE_NEIGHBORS = 5


@dataclass
class ModelConfig:
    n_input: int = 1024
    n_levels: int = 4
    widths: tuple[int, ...] = (32, 64, 128, 256)
    radii: tuple[float, ...] = (0.1, 0.2, 0.4, 0.8)
    k_neighbors: int = 16
    n_classes: int = 17
    n_superpoints: int = N_SUPERPOINTS
    stem_width: int = 32
    decoder_width: int = 32
    seed: int = 0
    tcp_loss_levels: str = "all"  # all | last
    use_local: bool = True
    use_sg: bool = True
    use_ga: bool = True
    use_laya: bool = True
    use_offset_loss: bool = True

    @property
    def level_sizes(self) -> list[int]:
        """Point counts per level, level 0 being the input."""
        sizes = [self.n_input]
        for _ in range(self.n_levels):
            sizes.append(sizes[-1] // 4)
        return sizes

    def validate(self, strict: bool = False) -> ModelConfig:
        if not 1 <= self.n_levels <= MAX_LEVEL:
            raise ValidationError(f"n_levels must be in 1..{MAX_LEVEL}, got {self.n_levels}")
        if len(self.widths) != self.n_levels or len(self.radii) != self.n_levels:
            raise ValidationError(
                f"widths and radii need {self.n_levels} entries, got "
                f"{len(self.widths)} and {len(self.radii)}"
            )
        if min(self.widths) < 1 or min(self.stem_width, self.decoder_width) < 1:
            raise ValidationError("feature widths must be positive")
        if min(self.radii) <= 0:
            raise ValidationError("ball radii must be positive")
        if self.k_neighbors < 1:
            raise ValidationError("k_neighbors must be at least 1")
        if self.n_classes < 2:
            raise ValidationError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.n_superpoints != N_SUPERPOINTS:
            raise ValidationError(f"n_superpoints is fixed at {N_SUPERPOINTS}")
        if self.tcp_loss_levels not in ("all", "last"):
            raise ValidationError(f"tcp_loss_levels must be all|last, got {self.tcp_loss_levels!r}")
        if not (self.use_local or self.use_sg):
            raise ValidationError("at least one of use_local / use_sg must be enabled")
        if strict and self.n_input % 4**self.n_levels:
            raise ContractError(
                f"n_input={self.n_input} is not divisible by 4^{self.n_levels}"
            )
        if self.level_sizes[-1] < 1:
            raise ContractError(f"n_input={self.n_input} is too small for {self.n_levels} levels")
        return self


# ----------------------------- parameters ------------------------------------


@dataclass
class EncoderParams:
    sgda: SGDAParams
    dpda: DPDAParams
    out: dc.Affine  # fused -> level width, added to the lifted residual


@dataclass
class DecoderParams:
    fuse: dc.Affine  # concat(interpolated, skip) -> output width


@dataclass
class ModelParams:
    stem: dc.Affine  # (xyz, normal) -> stem width
    encoders: list[EncoderParams]
    decoders: list[DecoderParams]  # coarsest first
    seg_head: dc.MLPParams
    offset_head: dc.MLPParams

    def named(self) -> dict[str, dc.Tensor]:
        return dict(dc.named_parameters(self))


def init_model(config: ModelConfig) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(config.seed)
    widths = [config.stem_width, *config.widths]
    stem = dc.init_affine(rng, 6, config.stem_width)
    encoders = []
    for level in range(1, config.n_levels + 1):
        prev_w, w = widths[level - 1], widths[level]
        encoders.append(
            EncoderParams(
                sgda=init_sgda(rng, prev_w, w),
                dpda=init_dpda(
                    rng, level, w, prev_w if level > 1 else None, m=config.n_superpoints
                ),
                out=dc.init_affine(rng, w, w),
            )
        )
    out_widths = [config.decoder_width, *config.widths[:-1]]
    decoders = []
    current = widths[-1]
    for j in range(config.n_levels, 0, -1):
        target = out_widths[j - 1]
        decoders.append(DecoderParams(dc.init_affine(rng, current + widths[j - 1], target)))
        current = target
    d = config.decoder_width
    return ModelParams(
        stem=stem,
        encoders=encoders,
        decoders=decoders,
        seg_head=dc.init_mlp(rng, (d, d, config.n_classes)),
        offset_head=dc.init_mlp(rng, (d, d, 3)),
    )


def save_model(path: str | Path, params: ModelParams) -> None:
    save_checkpoint(path, params.named())


def load_model(path: str | Path, config: ModelConfig) -> ModelParams:
    """Fresh parameters for ``config`` overwritten from the checkpoint; shapes must agree."""
    params = init_model(config)
    assign_parameters(params.named(), load_checkpoint(path))
    return params


# ----------------------------- geometry --------------------------------------


@dataclass(frozen=True)
class Frame:
    center: np.ndarray
    scale: float
    order: np.ndarray  # model row i is input row order[i]

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.order, kind="stable")

    def to_model(self, xyz: np.ndarray) -> np.ndarray:
        return (np.asarray(xyz) - self.center) / self.scale

    def to_raw(self, xyz: np.ndarray) -> np.ndarray:
        return geomkit.denormalize(xyz, self.center, self.scale)


@dataclass(frozen=True)
class LevelGeometry:
    sample: np.ndarray  # FPS indices into the previous level
    xyz: np.ndarray
    ball: geomkit.NeighborTable  # this level's points in the previous level
    up: geomkit.NeighborTable  # previous level's points in this level
    up_weights: np.ndarray


@dataclass(frozen=True)
class GeometryPlan:
    xyz: np.ndarray  # level 0, normalized and canonical
    levels: list[LevelGeometry] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(self.xyz), *(len(g.xyz) for g in self.levels)]


def build_plan(xyz: np.ndarray, config: ModelConfig) -> GeometryPlan:
    plan = GeometryPlan(np.asarray(xyz, dtype=np.float64))
    prev = plan.xyz
    for level, size in enumerate(config.level_sizes[1:], start=1):
        sample = geomkit.farthest_point_sample(prev, size, seed_index=0)
        cur = prev[sample]
        ball = geomkit.ball_query(cur, prev, config.radii[level - 1], config.k_neighbors)
        up = geomkit.knn(prev, cur, min(DECODER_NEIGHBORS, len(cur)))
        plan.levels.append(
            LevelGeometry(sample, cur, ball, up, geomkit.idw_from_distances(up.distances))
        )
        prev = cur
    return plan


@dataclass(frozen=True)
class Prepared:
    """A cloud in model space: canonical order, normalized coordinates, precomputed geometry."""

    frame: Frame
    xyz: np.ndarray
    normals: np.ndarray
    plan: GeometryPlan


def canonical_frame(
    points: np.ndarray, normals: np.ndarray
) -> tuple[Frame, np.ndarray, np.ndarray]:
    xyz = geomkit.as_coords(points)
    nrm = np.asarray(normals, dtype=np.float64)
    if nrm.shape != xyz.shape:
        raise ValidationError(f"normals {nrm.shape} do not match points {xyz.shape}")
    lengths = np.sqrt((nrm**2).sum(axis=1))
    if len(lengths) and np.max(np.abs(lengths - 1.0)) > NORMAL_TOL:
        raise ValidationError("non-unit normals in input cloud")
    order = geomkit.canonical_order(xyz)
    normed, center, scale = geomkit.normalize(xyz[order])
    return Frame(center, scale, order), normed, nrm[order]


def prepare(cloud: LabeledCloud, config: ModelConfig) -> Prepared:
    if cloud.n != config.n_input:
        raise SizeError(f"cloud has {cloud.n} points, model expects n_input={config.n_input}")
    frame, xyz, nrm = canonical_frame(cloud.points, cloud.normals)
    return Prepared(frame, xyz, nrm, build_plan(xyz, config))


# ----------------------------- forward pass ----------------------------------


def stem(xyz: np.ndarray, normals: np.ndarray, params: ModelParams) -> PointSet:
    x = dc.as_tensor(np.concatenate([xyz, normals], axis=1))
    return PointSet(dc.as_tensor(xyz), dc.relu(dc.affine_apply(params.stem, x)))


def featurize(cloud: LabeledCloud, params: ModelParams) -> PointSet:
    """Normalized (xyz, normal) lifted to the stem width, rows in canonical order."""
    _, xyz, nrm = canonical_frame(cloud.points, cloud.normals)
    return stem(xyz, nrm, params)


def encode(
    p0: PointSet, config: ModelConfig, params: ModelParams, plan: GeometryPlan
) -> tuple[list[PointSet], list[Superpoints]]:
    levels: list[PointSet] = []
    superpoints: list[Superpoints] = []
    prev = p0
    z_prev: Superpoints | None = None
    for level, (enc, geo) in enumerate(zip(params.encoders, plan.levels, strict=True), start=1):
        pts = lift_points(enc.sgda, prev.take(geo.sample))
        z = dpda_step(level, z_prev, pts, enc.dpda, use_ga=config.use_ga, use_laya=config.use_laya)

        local = glob = None
        if config.use_local:
            local = local_branch(
                pts, prev, config.radii[level - 1], config.k_neighbors, enc.sgda, table=geo.ball
            )
        if config.use_sg:
            glob = global_branch(pts, z, enc.sgda)
        if local is not None and glob is not None:
            fused = sgda_fuse(local, glob, enc.sgda.raw_alpha)
        else:
            fused = local if local is not None else glob
        assert fused is not None

        out = PointSet(pts.xyz, dc.affine_apply(enc.out, fused) + pts.features)
        log.debug("level %d: %d points, width %d", level, out.n, out.width)
        levels.append(out)
        superpoints.append(z)
        prev, z_prev = out, z
    return levels, superpoints


def interpolate_features(
    coarse: dc.Tensor, indices: np.ndarray, weights: np.ndarray
) -> dc.Tensor:
    """Weighted sum of coarse rows per fine point; convex weights preserve constants."""
    gathered = dc.gather(coarse, indices)  # (n_fine, k, C)
    w = dc.as_tensor(weights[:, :, None])
    return dc.reduce_sum(gathered * w, axis=1)


def decode(levels: list[PointSet], params: ModelParams, plan: GeometryPlan) -> dc.Tensor:
    """``levels`` starts with the stem output; returns features at input resolution."""
    n_levels = len(levels) - 1
    feat = levels[-1].features
    for step, j in enumerate(range(n_levels, 0, -1)):
        geo = plan.levels[j - 1]
        up = interpolate_features(feat, geo.up.indices, geo.up_weights)
        joined = dc.concat([up, levels[j - 1].features], axis=1)
        feat = dc.relu(dc.affine_apply(params.decoders[step].fuse, joined))
    return feat


def heads(decoded: dc.Tensor, params: ModelParams) -> tuple[dc.Tensor, dc.Tensor]:
    return dc.mlp_apply(params.seg_head, decoded), dc.mlp_apply(params.offset_head, decoded)


@dataclass
class ModelOutput:
    logits: dc.Tensor  # (n, n_classes), input row order
    offsets: dc.Tensor  # (n, 3), model units, input row order
    tcp_positions: list[dc.Tensor]  # per level (M, 3), model units
    levels: list[PointSet]
    superpoints: list[Superpoints]
    frame: Frame

    def labels(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)

    def tcp_raw(self) -> list[np.ndarray]:
        return [self.frame.to_raw(y.data) for y in self.tcp_positions]


def forward(
    cloud: LabeledCloud,
    config: ModelConfig,
    params: ModelParams,
    prepared: Prepared | None = None,
) -> ModelOutput:
    prep = prepared if prepared is not None else prepare(cloud, config)
    p0 = stem(prep.xyz, prep.normals, params)
    levels, superpoints = encode(p0, config, params, prep.plan)
    logits, offsets = heads(decode([p0, *levels], params, prep.plan), params)
    inverse = prep.frame.inverse
    return ModelOutput(
        logits=dc.gather(logits, inverse),
        offsets=dc.gather(offsets, inverse),
        tcp_positions=[z.Y for z in superpoints],
        levels=levels,
        superpoints=superpoints,
        frame=prep.frame,
    )


def predict_full(raw: LabeledCloud, sampled: LabeledCloud, output: ModelOutput) -> np.ndarray:
    """Labels for every raw point: the argmax itself when nothing was resampled, else a k=5 vote."""
    pred = output.labels()
    if raw.n == sampled.n and np.array_equal(raw.points, sampled.points):
        return pred
    return geomkit.propagate_labels(sampled.points, pred, raw.points, k=REFINE_NEIGHBORS)


# ----------------------------- supervision -----------------------------------


@dataclass(frozen=True)
class Targets:
    labels: np.ndarray  # (n,), input row order
    offsets: np.ndarray  # (n, 3), model units
    centroids: np.ndarray  # (T, 3), model units


def make_targets(cloud: LabeledCloud, frame: Frame) -> Targets:
    return Targets(
        labels=cloud.labels.copy(),
        offsets=derive_offsets(cloud) / frame.scale,
        centroids=frame.to_model(cloud.centroids),
    )
