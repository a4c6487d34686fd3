"""
Superpoint guided dual attention: each downsampled point mixes local
neighborhood attention (LocA) with attention over the level's superpoints (SG),
weighted by a learnable alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tcatseg import diffcore as dc
from tcatseg.attention import CWAParams, PointSet, cwa_update, cwa_update_masked, init_cwa
from tcatseg.dpda import Superpoints
from tcatseg.errors import DimensionError
from tcatseg.geomkit import NeighborTable, ball_query


@dataclass
class SGDAParams:
    lift: dc.Affine  # C_prev -> C, applied before attention
    local: CWAParams
    glob: CWAParams
    raw_alpha: dc.Tensor  # scalar; alpha = sigmoid(raw_alpha)

    @property
    def width(self) -> int:
        return self.lift.weight.shape[1]


def init_sgda(rng: np.random.Generator, prev_width: int, width: int) -> SGDAParams:
    return SGDAParams(
        lift=dc.init_affine(rng, prev_width, width),
        local=init_cwa(rng, width),
        glob=init_cwa(rng, width),
        raw_alpha=dc.parameter(np.zeros(())),
    )


def alpha(params: SGDAParams) -> dc.Tensor:
    return dc.sigmoid(params.raw_alpha)


def lift_points(params: SGDAParams, points: PointSet) -> PointSet:
    return PointSet(points.xyz, dc.affine_apply(params.lift, points.features))


def local_branch(
    points: PointSet,
    prev: PointSet,
    radius: float,
    k: int,
    params: SGDAParams,
    table: NeighborTable | None = None,
) -> dc.Tensor:
    """
    ``points`` carries features already at the level width; ``prev`` is lifted
    here. A precomputed ball-query ``table`` may be passed in.
    """
    if table is None:
        table = ball_query(points.coords(), prev.coords(), radius, k)
    return cwa_update_masked(params.local, points, lift_points(params, prev), table)


def global_branch(points: PointSet, z: Superpoints, params: SGDAParams) -> dc.Tensor:
    return cwa_update(params.glob, points, z.as_pointset())


def sgda_fuse(local: dc.Tensor, glob: dc.Tensor, raw_alpha: dc.Tensor) -> dc.Tensor:
    """alpha * global + (1 - alpha) * local."""
    if local.shape != glob.shape:
        raise DimensionError(f"sgda_fuse: local {local.shape} vs global {glob.shape}")
    a = dc.sigmoid(raw_alpha)
    return a * glob + (1.0 - a) * local
