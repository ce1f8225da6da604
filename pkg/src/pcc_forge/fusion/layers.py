"""Differentiable building blocks of the fusion graph.

Every op comes as a ``*_fwd`` returning ``(output, cache)`` and a matching
``*_bwd(cache, d_output)`` returning a dict of gradients. Vectors are 1-D
arrays, token sets are ``(n_tokens, D)`` arrays, and a weight ``W`` acts on a
column vector as ``W @ x`` (on token rows as ``X @ W.T``).
"""

from __future__ import annotations

import numpy as np

from ..cloud import as_points
from .params import AttentionParams, N_BLOCKS


def softmax_rows(S: np.ndarray) -> np.ndarray:
    E = np.exp(S - S.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# scaled dot-product cross-attention


def attention_fwd(Xq: np.ndarray, Xkv: np.ndarray, p: AttentionParams):
    """``softmax(Q K^T * scale) V`` without the output projection."""
    Q = Xq @ p.Wq.T
    K = Xkv @ p.Wk.T
    V = Xkv @ p.Wv.T
    A = softmax_rows((Q @ K.T) * p.scale)
    O = A @ V
    return O, (Xq, Xkv, Q, K, V, A, p)


def attention_bwd(cache, dO: np.ndarray) -> dict:
    Xq, Xkv, Q, K, V, A, p = cache
    dA = dO @ V.T
    dV = A.T @ dO
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True)) * p.scale
    dQ = dS @ K
    dK = dS.T @ Q
    return {
        "Xq": dQ @ p.Wq,
        "Xkv": dK @ p.Wk + dV @ p.Wv,
        "Wq": dQ.T @ Xq,
        "Wk": dK.T @ Xkv,
        "Wv": dV.T @ Xkv,
    }


# ---------------------------------------------------------------------------
# local-scale feature: block-weighted queries over the four block tokens


def local_feature_fwd(tokens: np.ndarray, weights, p: AttentionParams):
    """``weights=None`` is the unweighted path (no multiply at all)."""
    if tokens.shape[0] != N_BLOCKS:
        raise ValueError(f"expected {N_BLOCKS} block tokens, got {tokens.shape[0]}")
    if weights is None:
        Xq = tokens
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (N_BLOCKS,) or not np.isfinite(weights).all():
            raise ValueError("need four finite block weights")
        Xq = weights[:, None] * tokens
    O, acache = attention_fwd(Xq, tokens, p)
    m = O.sum(axis=0) / N_BLOCKS
    return p.Wo @ m, (tokens, weights, acache, m, p)


def local_feature_bwd(cache, dF: np.ndarray) -> dict:
    tokens, weights, acache, m, p = cache
    dm = p.Wo.T @ dF
    g = attention_bwd(acache, np.broadcast_to(dm / N_BLOCKS, (N_BLOCKS, dm.shape[0])))
    dXq = g["Xq"]
    # the unweighted path is the weighted one evaluated at w = 1
    dw = (dXq * tokens).sum(axis=1)
    dT = (dXq if weights is None else dXq * weights[:, None]) + g["Xkv"]
    return {"weights": dw, "tokens": dT, "Wq": g["Wq"], "Wk": g["Wk"], "Wv": g["Wv"],
            "Wo": np.outer(dF, m)}


def local_feature(tokens, weights, p: AttentionParams) -> np.ndarray:
    return local_feature_fwd(tokens, weights, p)[0]


# ---------------------------------------------------------------------------
# local/global fusion: the global feature queries {local, global}


def fuse_local_global_fwd(F_l: np.ndarray, F_g: np.ndarray, p: AttentionParams):
    if F_l.shape != F_g.shape:
        raise ValueError("local and global features must share a dimension")
    O, acache = attention_fwd(F_g[None, :], np.stack([F_l, F_g]), p)
    return p.Wo @ O[0], (acache, O[0], p)


def fuse_local_global_bwd(cache, dF: np.ndarray) -> dict:
    acache, o, p = cache
    do = p.Wo.T @ dF
    g = attention_bwd(acache, do[None, :])
    return {"F_l": g["Xkv"][0], "F_g": g["Xq"][0] + g["Xkv"][1],
            "Wq": g["Wq"], "Wk": g["Wk"], "Wv": g["Wv"], "Wo": np.outer(dF, o)}


def fuse_local_global(F_l, F_g, p: AttentionParams) -> np.ndarray:
    return fuse_local_global_fwd(F_l, F_g, p)[0]


def attention_weights(Xq, Xkv, p: AttentionParams) -> np.ndarray:
    return attention_fwd(np.atleast_2d(Xq), np.atleast_2d(Xkv), p)[1][5]


# ---------------------------------------------------------------------------
# assembling and transforming the CLIP feature


def assemble_clip_feature(fused_views, F_t) -> np.ndarray:
    """Rows +X, -X, +Y, -Y, +Z, -Z, text."""
    rows = [np.asarray(v, dtype=np.float64) for v in fused_views]
    if len(rows) != 6:
        raise ValueError(f"expected six per-view features, got {len(rows)}")
    rows.append(np.asarray(F_t, dtype=np.float64))
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise ValueError("all CLIP feature rows must share one dimension")
    return np.stack(rows)


def transform_clip_fwd(F_c: np.ndarray, F_p: np.ndarray, p: AttentionParams, proj=None):
    """The point feature (projected to ``D`` when needed) queries the rows of ``F_c``."""
    xq = F_p if proj is None else proj @ F_p
    if xq.shape[0] != F_c.shape[1]:
        raise ValueError(f"point feature dim {F_p.shape[0]} does not match CLIP dim {F_c.shape[1]}")
    O, acache = attention_fwd(xq[None, :], F_c, p)
    return p.Wo @ O[0], (acache, O[0], F_p, proj, p)


def transform_clip_bwd(cache, dF: np.ndarray) -> dict:
    acache, o, F_p, proj, p = cache
    do = p.Wo.T @ dF
    g = attention_bwd(acache, do[None, :])
    dxq = g["Xq"][0]
    out = {"F_c": g["Xkv"], "Wq": g["Wq"], "Wk": g["Wk"], "Wv": g["Wv"], "Wo": np.outer(dF, o)}
    if proj is None:
        out["F_p"] = dxq
    else:
        out["F_p"] = proj.T @ dxq
        out["proj"] = np.outer(dxq, F_p)
    return out


def transform_clip(F_c, F_p, p: AttentionParams, proj=None) -> np.ndarray:
    return transform_clip_fwd(F_c, F_p, p, proj)[0]


# ---------------------------------------------------------------------------
# final 1x1 fusion (a linear map on the concatenated vector)


def fuse_final_fwd(F_p: np.ndarray, F_cp: np.ndarray, W: np.ndarray, b: np.ndarray):
    x = np.concatenate([F_p, F_cp])
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"fusion matrix expects {W.shape[1]} inputs, got {x.shape[0]}")
    return W @ x + b, (x, F_p.shape[0], W)


def fuse_final_bwd(cache, dF: np.ndarray) -> dict:
    x, n_p, W = cache
    dx = W.T @ dF
    return {"F_p": dx[:n_p], "F_cp": dx[n_p:], "W": np.outer(dF, x), "b": dF.copy()}


def fuse_final(F_p, F_cp, W, b) -> np.ndarray:
    return fuse_final_fwd(F_p, F_cp, W, b)[0]


# ---------------------------------------------------------------------------
# toy point encoder / decoder


def point_encode_fwd(cloud, W: np.ndarray, b: np.ndarray):
    """``tanh(max_i(W p_i + b))``; the affine map is evaluated per coordinate
    column so every point's row is computed identically wherever it sits."""
    pts = np.asarray(as_points(cloud), dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError("cannot encode an empty cloud")
    H = pts[:, 0:1] * W[:, 0] + pts[:, 1:2] * W[:, 1] + pts[:, 2:3] * W[:, 2] + b
    arg = H.argmax(axis=0)
    m = H[arg, np.arange(H.shape[1])]
    F = np.tanh(m)
    return F, (pts, arg, F)


def point_encode_bwd(cache, dF: np.ndarray) -> dict:
    pts, arg, F = cache
    dm = dF * (1.0 - F * F)
    return {"W": dm[:, None] * pts[arg], "b": dm}


def point_encode_toy(cloud, W, b) -> np.ndarray:
    return point_encode_fwd(cloud, W, b)[0]


def folding_grid(n_out: int) -> np.ndarray:
    """``k x k`` grid over ``[-0.5, 0.5]^2`` (``k = floor(sqrt(n_out))``), cycled to ``n_out`` rows."""
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    k = int(np.floor(np.sqrt(n_out)))
    axis = np.linspace(-0.5, 0.5, k) if k > 1 else np.zeros(1)
    gu, gv = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([gu.ravel(), gv.ravel()], axis=1)
    return grid[np.arange(n_out) % grid.shape[0]]


def point_decode_fwd(F_D: np.ndarray, n_out: int, W1, b1, W2, b2):
    G = folding_grid(n_out)
    shared = W1[:, 2:] @ F_D + b1
    h = np.tanh(G @ W1[:, :2].T + shared)
    out = np.tanh(h @ W2.T + b2)
    return out, (G, F_D, h, out, W1, W2)


def point_decode_bwd(cache, dOut: np.ndarray) -> dict:
    G, F_D, h, out, W1, W2 = cache
    d2 = dOut * (1.0 - out * out)
    dh = d2 @ W2
    d1 = dh * (1.0 - h * h)
    c = d1.sum(axis=0)
    dW1 = np.empty_like(W1)
    dW1[:, :2] = d1.T @ G
    dW1[:, 2:] = np.outer(c, F_D)
    return {"F_D": W1[:, 2:].T @ c, "W1": dW1, "b1": c, "W2": d2.T @ h, "b2": d2.sum(axis=0)}


def point_decode_toy(F_D, n_out: int, W1, b1, W2, b2) -> np.ndarray:
    return point_decode_fwd(F_D, n_out, W1, b1, W2, b2)[0]


# ---------------------------------------------------------------------------
# text processing


def process_text_fwd(F_T: np.ndarray, W: np.ndarray, b: np.ndarray):
    z = W @ F_T + b
    n = np.linalg.norm(z)
    return z / n, (F_T, z / n, n, W)


def process_text_bwd(cache, dF: np.ndarray) -> dict:
    F_T, y, n, W = cache
    dz = (dF - y * (y @ dF)) / n
    return {"F_T": W.T @ dz, "W": np.outer(dz, F_T), "b": dz}
