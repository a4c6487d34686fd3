"""
Channel-wise (vector) attention between query and key point sets.

    C(q, k) = softmax_k( w_gate( (f_q - f_k) + w_pos(x_q - x_k) ) )   per channel
    f_q'    = sum_k C(q, k) * (f_q - f_k)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tcatseg import diffcore as dc
from tcatseg.errors import DimensionError, SizeError
from tcatseg.geomkit import NeighborTable


@dataclass
class PointSet:
    xyz: dc.Tensor  # (n, 3)
    features: dc.Tensor  # (n, C)

    def __post_init__(self) -> None:
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise DimensionError(f"PointSet coordinates must be (n, 3), got {self.xyz.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.xyz.shape[0]:
            raise DimensionError(
                f"PointSet rows differ: xyz {self.xyz.shape} vs features {self.features.shape}"
            )

    @classmethod
    def from_arrays(cls, xyz: np.ndarray, features: dc.Tensor | np.ndarray) -> PointSet:
        return cls(dc.as_tensor(xyz), dc.as_tensor(features))

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def coords(self) -> np.ndarray:
        return self.xyz.data

    def take(self, indices: np.ndarray) -> PointSet:
        return PointSet(dc.gather(self.xyz, indices), dc.gather(self.features, indices))


@dataclass
class CWAParams:
    w_pos: dc.MLPParams  # R^3 -> R^C
    w_gate: dc.MLPParams  # R^C -> R^C

    @property
    def width(self) -> int:
        return self.w_gate.d_out


def init_cwa(rng: np.random.Generator, width: int) -> CWAParams:
    return CWAParams(
        w_pos=dc.init_mlp(rng, (3, width, width)),
        w_gate=dc.init_mlp(rng, (width, width, width)),
    )


def _attend(
    params: CWAParams,
    q_xyz: dc.Tensor,
    q_f: dc.Tensor,
    k_xyz: dc.Tensor,
    k_f: dc.Tensor,
    mask: np.ndarray | None = None,
) -> tuple[dc.Tensor, dc.Tensor]:
    """
    Queries (q, 3)/(q, C); keys either shared (K, 3)/(K, C) or grouped per query
    (q, K, 3)/(q, K, C). Returns channel weights (q, K, C) and updates (q, C).
    """
    q, c = q_f.shape
    if k_f.shape[-1] != c or params.width != c:
        raise DimensionError(
            f"CWA width mismatch: query {q_f.shape}, keys {k_f.shape}, params width {params.width}"
        )
    if k_xyz.ndim == 2:
        k_xyz = dc.reshape(k_xyz, (1, *k_xyz.shape))
        k_f = dc.reshape(k_f, (1, *k_f.shape))
    rel_x = dc.reshape(q_xyz, (q, 1, 3)) - k_xyz
    rel_f = dc.reshape(q_f, (q, 1, c)) - k_f
    logits = dc.mlp_apply(params.w_gate, rel_f + dc.mlp_apply(params.w_pos, rel_x))
    weights = dc.softmax(logits, axis=1, mask=None if mask is None else mask[:, :, None])
    return weights, dc.reduce_sum(weights * rel_f, axis=1)


def cwa_weights(
    params: CWAParams, q_xyz: np.ndarray | dc.Tensor, q_f: np.ndarray | dc.Tensor, keys: PointSet
) -> dc.Tensor:
    """Channel weights (k, C) of one query against every key."""
    if keys.n == 0:
        raise SizeError("cwa_weights: empty key set")
    qx = dc.reshape(dc.as_tensor(q_xyz), (1, 3))
    qf = dc.as_tensor(q_f)
    qf = dc.reshape(qf, (1, qf.shape[-1]))
    weights, _ = _attend(params, qx, qf, keys.xyz, keys.features)
    return dc.reshape(weights, (keys.n, keys.width))


def cwa_update(params: CWAParams, queries: PointSet, keys: PointSet) -> dc.Tensor:
    """Every query attends to every key."""
    if keys.n == 0:
        raise SizeError("cwa_update: empty key set")
    if queries.width != keys.width:
        raise DimensionError(f"cwa_update: query width {queries.width} vs key width {keys.width}")
    _, out = _attend(params, queries.xyz, queries.features, keys.xyz, keys.features)
    return out


def first_occurrence_mask(indices: np.ndarray) -> np.ndarray:
    """1 where an index appears for the first time in its row, else 0."""
    idx = np.asarray(indices)
    mask = np.ones(idx.shape, dtype=bool)
    for j in range(1, idx.shape[1]):
        mask[:, j] = ~(idx[:, :j] == idx[:, j : j + 1]).any(axis=1)
    return mask


def cwa_update_masked(
    params: CWAParams, queries: PointSet, keys: PointSet, table: NeighborTable
) -> dc.Tensor:
    """Each query attends to its own neighbor list; repeated indices count once."""
    if table.n_queries != queries.n:
        raise DimensionError(f"neighbor table has {table.n_queries} rows for {queries.n} queries")
    idx = table.indices
    if idx.size and (idx.min() < 0 or idx.max() >= keys.n):
        raise IndexError(f"neighbor index out of range for {keys.n} keys")
    if queries.width != keys.width:
        raise DimensionError(f"cwa_update_masked: widths {queries.width} vs {keys.width}")
    _, out = _attend(
        params,
        queries.xyz,
        queries.features,
        dc.gather(keys.xyz, idx),
        dc.gather(keys.features, idx),
        mask=first_occurrence_mask(idx),
    )
    return out
