"""
Training losses: superpoint-to-centroid matching (Hungarian + smooth L1),
Chamfer distance between offset sets, and per-point cross-entropy.

Matched pairs and Chamfer nearest indices are computed on the values and held
fixed during backward.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from tcatseg import diffcore as dc
from tcatseg.errors import SizeError, ValidationError

SENTINEL_FACTOR = 1e6
TIE_TOL = 1e-9
SMOOTH_L1_BETA = 1.0


# ----------------------------- assignment ------------------------------------


@dataclass(frozen=True)
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction, ground truth), sorted by prediction
    cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def _solve_square(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting paths with row/column potentials, O(n^3). Returns row->col, u, v."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = 1-based row holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cols = np.flatnonzero(~used[1:]) + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = int(cols[np.argmin(minv[cols])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _reassign(tight: np.ndarray, match: np.ndarray, i: int, j: int) -> np.ndarray | None:
    """
    Perfect matching on the tight graph that keeps rows < i, puts row i on
    column j, and rematches only rows > i. None when no such matching exists.
    """
    new = match.copy()
    holder = int(np.flatnonzero(new == j)[0])
    freed = int(new[i])
    new[i] = j
    owner = {int(c): r for r, c in enumerate(new) if r != holder}
    seen: set[int] = set()

    def augment(row: int) -> bool:
        for col in np.flatnonzero(tight[row]):
            col = int(col)
            if col in seen:
                continue
            seen.add(col)
            other = owner.get(col)
            if col == freed or (other is not None and other > i and augment(other)):
                new[row] = col
                owner[col] = row
                return True
        return False

    return new if augment(holder) else None


def hungarian(cost: np.ndarray) -> Assignment:
    """
    Minimum-cost assignment of min(r, c) pairs. Rectangular inputs are padded to
    square with a sentinel cost; among equal-cost optima the lexicographically
    smallest pair list wins.
    """
    c_in = np.asarray(cost, dtype=np.float64)
    if c_in.ndim != 2 or 0 in c_in.shape:
        raise SizeError(f"hungarian: need a non-empty matrix, got shape {c_in.shape}")
    if not np.all(np.isfinite(c_in)):
        raise ValidationError("hungarian: cost matrix contains non-finite values")
    r, c = c_in.shape
    n = max(r, c)
    top = float(np.abs(c_in).max())
    sentinel = SENTINEL_FACTOR * top if top > 0 else SENTINEL_FACTOR
    padded = np.full((n, n), sentinel)
    padded[:r, :c] = c_in
    # row then column reduction leaves the argmin unchanged and zeroes the padding
    padded -= padded.min(axis=1, keepdims=True)
    padded -= padded.min(axis=0, keepdims=True)

    match, u, v = _solve_square(padded)
    slack = padded - u[:, None] - v[None, :]
    tight = np.abs(slack) <= TIE_TOL * (1.0 + top)
    tight[np.arange(n), match] = True

    # fix rows in order, each on the smallest column some optimum still allows
    for i in range(r):
        real = [j for j in np.flatnonzero(tight[i, :c]) if j not in match[:i]]
        skip = [j for j in np.flatnonzero(tight[i, c:]) + c if j not in match[:i]]
        for j in (*real, *skip):
            j = int(j)
            if j == match[i] or (j >= c and match[i] >= c):
                break
            trial = _reassign(tight, match, i, j)
            if trial is not None:
                match = trial
                break

    pairs = [(i, int(match[i])) for i in range(r) if match[i] < c]
    total = 0.0
    for i, j in pairs:
        total += float(c_in[i, j])
    return Assignment(pairs, total)


# ----------------------------- losses ----------------------------------------


def smooth_l1(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"smooth_l1: shapes {x.shape} and {y.shape} differ")
    d = np.abs(x - y)
    return float(np.where(d < SMOOTH_L1_BETA, 0.5 * d**2, d - 0.5).sum())


def smooth_l1_tensor(diff: dc.Tensor) -> dc.Tensor:
    """Summed smooth L1 of a difference tensor; the branch choice is constant in backward."""
    quad = dc.as_tensor((np.abs(diff.data) < SMOOTH_L1_BETA).astype(np.float64))
    lin = 1.0 - quad
    terms = dc.scale(dc.square(diff), 0.5) * quad + dc.add_scalar(dc.absolute(diff), -0.5) * lin
    return dc.reduce_sum(terms)


def _tcp_levels(tcp_levels: Sequence[dc.Tensor], which: str) -> Sequence[dc.Tensor]:
    if which == "last":
        return tcp_levels[-1:]
    return tcp_levels


def loss_tcp(
    tcp_levels: Sequence[dc.Tensor], gt_centroids: np.ndarray, levels: str = "all"
) -> tuple[dc.Tensor, list[Assignment]]:
    """Smooth L1 between Hungarian-matched superpoints and centroids, summed over levels."""
    gt = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise ValidationError("loss_tcp: no ground-truth centroids")
    total = dc.as_tensor(0.0)
    matches = []
    for y in _tcp_levels(tcp_levels, levels):
        if len(gt) > y.shape[0]:
            raise ValidationError(
                f"more teeth than superpoints: {len(gt)} centroids for {y.shape[0]} superpoints"
            )
        a = hungarian(np.sqrt(cdist(y.data, gt, "sqeuclidean")))
        matches.append(a)
        diff = dc.gather(y, a.rows) - dc.as_tensor(gt[a.cols])
        total = total + smooth_l1_tensor(diff)
    return total, matches


def loss_offset(pred: dc.Tensor | np.ndarray, gt: dc.Tensor | np.ndarray) -> dc.Tensor:
    """
    Chamfer distance between the ground-truth offset set O and the predicted
    set O_hat, both directions divided by |O|.
    """
    p = dc.as_tensor(pred)
    g = dc.as_tensor(gt)
    if p.size == 0 or g.size == 0:
        raise ValidationError("loss_offset: offset sets must be non-empty")
    d = cdist(g.data.reshape(-1, 3), p.data.reshape(-1, 3), "sqeuclidean")
    to_pred = np.argmin(d, axis=1)  # for each o, nearest o_hat
    to_gt = np.argmin(d, axis=0)  # for each o_hat, nearest o
    forward = dc.reduce_sum(dc.square(g - dc.gather(p, to_pred)))
    backward = dc.reduce_sum(dc.square(p - dc.gather(g, to_gt)))
    return dc.scale(forward + backward, 1.0 / g.shape[0])


def loss_seg(logits: dc.Tensor, labels: np.ndarray) -> dc.Tensor:
    """Mean cross-entropy, stabilized through log-softmax."""
    lab = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if lab.shape != (n,):
        raise ValidationError(f"loss_seg: labels of shape {lab.shape} for {n} rows")
    if n == 0:
        raise ValidationError("loss_seg: no points")
    if lab.min() < 0 or lab.max() >= c:
        raise ValidationError(f"loss_seg: labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), lab] = 1.0
    picked = dc.reduce_sum(dc.log_softmax(logits, axis=1) * dc.as_tensor(onehot))
    return dc.scale(picked, -1.0 / n)


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    tcp: float
    offset: float
    total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in (self.seg, self.tcp, self.offset, self.total))


def loss_total(
    seg: dc.Tensor, tcp: dc.Tensor, offset: dc.Tensor | None = None
) -> tuple[dc.Tensor, LossBreakdown]:
    """Unweighted sum; a missing offset term counts as zero."""
    total = seg + tcp
    off = 0.0
    if offset is not None:
        total = total + offset
        off = offset.item()
    return total, LossBreakdown(seg.item(), tcp.item(), off, total.item())
