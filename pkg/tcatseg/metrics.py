"""
Segmentation metrics: point-wise OA/DSC/SEN/PPV and the tooth-level TIR, TLA,
TSA with their mean as the overall score.

TLA, TSA and TIR follow local definitions (see ``localization_accuracy`` and
friends); they are not byte-compatible with any challenge scorer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from tcatseg.errors import ValidationError
from tcatseg.losses import hungarian

GINGIVA = 0
METRIC_KEYS = ("oa", "dsc", "sen", "ppv", "tir", "tla", "tsa", "score")


@dataclass(frozen=True)
class ToothInstance:
    instance_id: int
    label: int
    members: np.ndarray
    centroid: np.ndarray
    diagonal: float  # bounding-box diagonal, the localization scale


def extract_instances(
    points: np.ndarray, labels: np.ndarray, instances: np.ndarray
) -> list[ToothInstance]:
    out = []
    for inst in np.unique(instances[instances > 0]):
        members = np.flatnonzero(instances == inst)
        pts = points[members]
        out.append(
            ToothInstance(
                instance_id=int(inst),
                label=int(np.bincount(labels[members]).argmax()),
                members=members,
                centroid=pts.mean(axis=0),
                diagonal=float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))),
            )
        )
    return out


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """counts[gt, pred]."""
    p = np.asarray(pred, dtype=np.int64)
    g = np.asarray(gt, dtype=np.int64)
    if p.shape != g.shape:
        raise ValidationError(f"confusion: {p.shape} predictions vs {g.shape} labels")
    for name, arr in (("prediction", p), ("label", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValidationError(f"confusion: {name} outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (g, p), 1)
    return counts


def point_metrics(conf: np.ndarray) -> tuple[float, float, float, float]:
    """OA over all points; DSC, SEN, PPV macro-averaged over tooth classes present in GT."""
    total = int(conf.sum())
    if total == 0:
        raise ValidationError("point_metrics: empty confusion matrix")
    oa = float(np.trace(conf)) / total
    tp = np.diag(conf).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    present = [k for k in range(conf.shape[0]) if k != GINGIVA and conf[k].sum() > 0]
    if not present:
        return oa, 1.0, 1.0, 1.0
    sen = [tp[k] / (tp[k] + fn[k]) for k in present]
    ppv = [tp[k] / (tp[k] + fp[k]) if tp[k] + fp[k] > 0 else 0.0 for k in present]
    dsc = [2 * tp[k] / (2 * tp[k] + fp[k] + fn[k]) for k in present]
    return oa, float(np.mean(dsc)), float(np.mean(sen)), float(np.mean(ppv))


def identification_rate(pred: np.ndarray, teeth: list[ToothInstance]) -> float:
    """Fraction of GT teeth whose majority predicted label (ties to the smaller) is right."""
    if not teeth:
        return 1.0
    p = np.asarray(pred, dtype=np.int64)
    hits = sum(int(np.bincount(p[t.members]).argmax()) == t.label for t in teeth)
    return hits / len(teeth)


def localization_accuracy(tcp: np.ndarray, teeth: list[ToothInstance]) -> float:
    """Mean over GT teeth of max(0, 1 - d / diagonal) after Hungarian matching."""
    pred = np.asarray(tcp, dtype=np.float64).reshape(-1, 3)
    if not teeth:
        raise ValidationError("localization_accuracy: no ground-truth teeth")
    if len(teeth) > len(pred):
        raise ValidationError(
            f"localization_accuracy: {len(teeth)} teeth for {len(pred)} superpoints"
        )
    centroids = np.stack([t.centroid for t in teeth])
    dist = np.sqrt(cdist(pred, centroids, "sqeuclidean"))
    scores = np.zeros(len(teeth))
    for p_idx, g_idx in hungarian(dist).pairs:
        rho = teeth[g_idx].diagonal
        d = dist[p_idx, g_idx]
        scores[g_idx] = max(0.0, 1.0 - d / rho) if rho > 0 else float(d == 0)
    return float(scores.mean())


def segmentation_accuracy(pred: np.ndarray, gt: np.ndarray, instances: np.ndarray) -> float:
    """Point accuracy restricted to GT tooth points."""
    teeth = np.asarray(instances) > 0
    if not teeth.any():
        return 1.0
    return float(np.mean(np.asarray(pred)[teeth] == np.asarray(gt)[teeth]))


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    dsc: float
    sen: float
    ppv: float
    tir: float
    tla: float
    tsa: float
    score: float

    @classmethod
    def build(
        cls, oa: float, dsc: float, sen: float, ppv: float, tir: float, tla: float, tsa: float
    ) -> MetricsReport:
        return cls(oa, dsc, sen, ppv, tir, tla, tsa, (tla + tsa + tir) / 3.0)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def evaluate(
    pred: np.ndarray,
    tcp: np.ndarray,
    points: np.ndarray,
    labels: np.ndarray,
    instances: np.ndarray,
    n_classes: int,
) -> MetricsReport:
    """All metrics for one cloud; ``tcp`` lives in the same frame as ``points``."""
    teeth = extract_instances(points, labels, instances)
    oa, dsc, sen, ppv = point_metrics(confusion(pred, labels, n_classes))
    return MetricsReport.build(
        oa=oa,
        dsc=dsc,
        sen=sen,
        ppv=ppv,
        tir=identification_rate(pred, teeth),
        tla=localization_accuracy(tcp, teeth),
        tsa=segmentation_accuracy(pred, labels, instances),
    )
