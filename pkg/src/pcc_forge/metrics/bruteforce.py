"""Exhaustive-scan reference metrics used by the benchmark."""

import numpy as np

from ..cloud import as_points


def brute_nn_sq(src, dst, chunk: int = 1024) -> np.ndarray:
    a = np.asarray(as_points(src), dtype=np.float64)
    b = np.asarray(as_points(dst), dtype=np.float64)
    out = np.empty(a.shape[0])
    for s in range(0, a.shape[0], chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


def brute_chamfer_l1(P, Q) -> float:
    return 0.5 * (np.sqrt(brute_nn_sq(P, Q)).mean() + np.sqrt(brute_nn_sq(Q, P)).mean())
