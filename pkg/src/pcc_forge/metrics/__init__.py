"""Completion metrics backed by an exact k-d tree."""

from .distances import (
    DEFAULT_F1_THRESHOLD,
    chamfer_l1,
    chamfer_l2,
    f1_score,
    fidelity,
    mmd,
    pair_metrics,
)
from .kdtree import NnIndex, build_index, nearest
from .report import MetricReport, PairSpec, evaluate_pairs, read_pair_manifest

__all__ = [
    "DEFAULT_F1_THRESHOLD", "MetricReport", "NnIndex", "PairSpec", "build_index",
    "chamfer_l1", "chamfer_l2", "evaluate_pairs", "f1_score", "fidelity", "mmd",
    "nearest", "pair_metrics", "read_pair_manifest",
]
