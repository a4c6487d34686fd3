"""
Dental perception dual attention: per encoder level, M learnable superpoints
(TCP) gather global context from the level's points (GA) and stay consistent
with the previous level's superpoints (LayA), mixed by a learnable beta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tcatseg import diffcore as dc
from tcatseg.attention import CWAParams, PointSet, cwa_update, init_cwa
from tcatseg.errors import ContractError, DimensionError

N_SUPERPOINTS = 16
MAX_LEVEL = 4


@dataclass
class Superpoints:
    Y: dc.Tensor  # (M, 3)
    H: dc.Tensor  # (M, C)
    level: int

    @property
    def m(self) -> int:
        return self.Y.shape[0]

    def as_pointset(self) -> PointSet:
        return PointSet(self.Y, self.H)


@dataclass
class DPDAParams:
    tcp_embedding: dc.Tensor  # H_init, (M, C)
    ga: CWAParams
    laya: CWAParams | None  # absent at level 1
    prev_proj: dc.Affine | None  # C_prev -> C for LayA keys
    raw_beta: dc.Tensor  # scalar; beta = sigmoid(raw_beta)

    @property
    def width(self) -> int:
        return self.tcp_embedding.shape[1]


def init_dpda(
    rng: np.random.Generator, level: int, width: int, prev_width: int | None, m: int = N_SUPERPOINTS
) -> DPDAParams:
    bound = float(np.sqrt(1.0 / width))
    first = level == 1
    return DPDAParams(
        tcp_embedding=dc.parameter(rng.uniform(-bound, bound, size=(m, width))),
        ga=init_cwa(rng, width),
        laya=None if first else init_cwa(rng, width),
        prev_proj=None if first or prev_width is None else dc.init_affine(rng, prev_width, width),
        raw_beta=dc.parameter(np.zeros(())),
    )


def beta(params: DPDAParams) -> dc.Tensor:
    return dc.sigmoid(params.raw_beta)


def interpolate_positions(H: dc.Tensor, points: PointSet) -> dc.Tensor:  # noqa: N803
    """Y = softmax(H F^T) X, each row a convex combination of point coordinates."""
    if H.shape[1] != points.width:
        raise DimensionError(
            f"interpolate_positions: superpoint width {H.shape[1]} vs point width {points.width}"
        )
    weights = dc.softmax(dc.matmul(H, dc.transpose(points.features)), axis=1)
    return dc.matmul(weights, points.xyz)


def dpda_step(
    level: int,
    z_prev: Superpoints | None,
    points: PointSet,
    params: DPDAParams,
    use_ga: bool = True,
    use_laya: bool = True,
) -> Superpoints:
    """
    H' = beta * CWA(Z_i, P_i) + (1 - beta) * CWA(Z_i, Z_{i-1}), Y' = softmax(H' F^T) X.
    Level 1 has no previous superpoints and uses the GA term alone.
    """
    if not 1 <= level <= MAX_LEVEL:
        raise ContractError(f"dpda_step: level must be in 1..{MAX_LEVEL}, got {level}")
    if points.n == 0:
        raise ContractError("dpda_step: empty point set")
    if level > 1 and z_prev is None:
        raise ContractError(f"dpda_step: level {level} needs the previous superpoints")

    H = params.tcp_embedding  # noqa: N806
    z = Superpoints(interpolate_positions(H, points), H, level)
    laya_on = use_laya and level > 1 and params.laya is not None and z_prev is not None

    ga = cwa_update(params.ga, z.as_pointset(), points) if use_ga else None
    laya = None
    if laya_on:
        assert z_prev is not None and params.laya is not None
        prev_h = z_prev.H
        if params.prev_proj is not None:
            prev_h = dc.affine_apply(params.prev_proj, prev_h)
        laya = cwa_update(params.laya, z.as_pointset(), PointSet(z_prev.Y, prev_h))

    if ga is not None and laya is not None:
        b = beta(params)
        h_new = b * ga + (1.0 - b) * laya
    elif ga is not None:
        h_new = ga
    elif laya is not None:
        h_new = laya
    else:
        h_new = H
    return Superpoints(interpolate_positions(h_new, points), h_new, level)


def tcp_all_levels(superpoints: list[Superpoints]) -> list[dc.Tensor]:
    return [z.Y for z in superpoints]
