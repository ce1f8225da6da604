"""Chamfer distance, F-score, fidelity and minimal matching distance.

All values are raw (no x10^3 scaling). Chamfer follows the half-sum
convention ``0.5 * (mean_P + mean_Q)``. Every reduction runs in double
precision through ``math.fsum`` so results do not depend on summation order.
"""

from __future__ import annotations

import math

import numpy as np

from ..cloud import as_points
from .kdtree import NnIndex

DEFAULT_F1_THRESHOLD = 0.01


def _points(cloud) -> np.ndarray:
    pts = np.asarray(as_points(cloud), dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError("metric undefined for an empty cloud")
    return pts


def _index(cloud) -> NnIndex:
    return cloud if isinstance(cloud, NnIndex) else NnIndex(_points(cloud))


def _pts_of(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, NnIndex) else _points(cloud)


def nn_sq_distances(src, dst) -> np.ndarray:
    """Squared distance from every point of ``src`` to its nearest point in ``dst``."""
    return _index(dst).query(_pts_of(src))[1]


def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / values.shape[0]


def directional_distances(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour squared distances P->Q and Q->P."""
    return nn_sq_distances(P, Q), nn_sq_distances(Q, P)


def chamfer_l1(P, Q) -> float:
    d_pq, d_qp = directional_distances(P, Q)
    return 0.5 * (_mean(np.sqrt(d_pq)) + _mean(np.sqrt(d_qp)))


def chamfer_l2(P, Q) -> float:
    d_pq, d_qp = directional_distances(P, Q)
    return 0.5 * (_mean(d_pq) + _mean(d_qp))


def _f1_from(d_pq: np.ndarray, d_qp: np.ndarray, threshold: float) -> float:
    precision = float(np.count_nonzero(np.sqrt(d_pq) < threshold)) / d_pq.shape[0]
    recall = float(np.count_nonzero(np.sqrt(d_qp) < threshold)) / d_qp.shape[0]
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_score(P, Q, threshold: float = DEFAULT_F1_THRESHOLD) -> float:
    """F-score of ``P`` (prediction) against ``Q`` (reference) at ``threshold``."""
    if not (threshold > 0 and math.isfinite(threshold)):
        raise ValueError(f"threshold must be positive, got {threshold}")
    return _f1_from(*directional_distances(P, Q), threshold)


def fidelity(P, O) -> float:
    """Mean distance from each input point to its nearest output point."""
    return _mean(np.sqrt(nn_sq_distances(P, O)))


def mmd(O, references) -> tuple[float, int]:
    """Smallest L2 Chamfer distance from ``O`` to any reference, with its index."""
    references = list(references)
    if not references:
        raise ValueError("reference set is empty")
    o_index = NnIndex(_points(O))
    best, best_i = math.inf, -1
    for i, ref in enumerate(references):
        d = chamfer_l2(o_index, ref)
        if d < best:
            best, best_i = d, i
    return best, best_i


def pair_metrics(pred, gt, partial=None, threshold: float = DEFAULT_F1_THRESHOLD) -> dict:
    """All per-pair values sharing one pair of tree queries."""
    pred_idx = NnIndex(_points(pred))
    gt_idx = NnIndex(_points(gt))
    d_pg = gt_idx.query(pred_idx.points)[1]
    d_gp = pred_idx.query(gt_idx.points)[1]
    if partial is None:
        fid = _mean(np.sqrt(d_gp))
    else:
        fid = fidelity(partial, pred_idx)
    return {
        "cd_l1": 0.5 * (_mean(np.sqrt(d_pg)) + _mean(np.sqrt(d_gp))),
        "cd_l2": 0.5 * (_mean(d_pg) + _mean(d_gp)),
        "f1": _f1_from(d_pg, d_gp, threshold),
        "fidelity": fid,
    }
