"""Central finite-difference verification of the analytic gradients.

Each registered op exposes its raw output and a fixed random readout ``R``;
the objective is ``sum(R * out)``. Numeric derivatives difference the op
output first and contract afterwards, so output entries untouched by a
perturbation cancel exactly. The reported error for a parameter group is
``max|a - n| / max(max|a|, max|n|)``: per-coordinate ratios are meaningless
for entries whose true gradient sits at the float64 roundoff level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .model import Prepared, backward, chamfer_l2_with_grad, run_fusion
from .params import AttentionParams, BlockWeights, FusionParams, init_params

DEFAULT_H = 1e-5

LINEAR_TOL = 1e-10
NONLINEAR_TOL = 1e-6


@dataclass
class GradCheckResult:
    op: str
    max_rel_error: float
    group: str
    index: tuple
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def numeric_gradient(out_fn: Callable[[dict], np.ndarray], readout, inputs: dict, group: str,
                     h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of ``sum(readout * out_fn(inputs))`` over one input array.

    The divisor is the representable step ``(x+h) - (x-h)``, not ``2h``.
    """
    x = inputs[group]
    R = np.asarray(readout, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        xp, xm = orig + h, orig - h
        x[idx] = xp
        yp = np.asarray(out_fn(inputs), dtype=np.float64)
        x[idx] = xm
        ym = np.asarray(out_fn(inputs), dtype=np.float64)
        x[idx] = orig
        if not (np.isfinite(yp).all() and np.isfinite(ym).all()):
            raise FloatingPointError(f"non-finite output while perturbing {group}{idx}")
        grad[idx] = math.fsum(np.ravel(R * (yp - ym))) / (xp - xm)
    return grad


def compare(analytic: dict, numeric: dict) -> tuple[float, str, tuple]:
    """Worst group error and the coordinate of its largest discrepancy."""
    worst = (0.0, "", ())
    for group, a in analytic.items():
        a = np.asarray(a, dtype=np.float64)
        n = numeric[group]
        if not (np.isfinite(a).all() and np.isfinite(n).all()):
            raise FloatingPointError(f"non-finite gradient in {group}")
        if not a.size:
            continue
        diff = np.abs(a - n)
        scale = max(np.abs(a).max(), np.abs(n).max())
        err = float(diff.max() / scale) if scale > 0 else float(diff.max())
        if err > worst[0] or not worst[1]:
            i = np.unravel_index(int(np.argmax(diff)), diff.shape)
            worst = (err, group, tuple(int(k) for k in i))
    return worst


def grad_check(op: str, inputs: dict | None = None, h: float = DEFAULT_H, seed: int = 0,
               dim: int = 6, corrupt: bool = False) -> GradCheckResult:
    """Check one registered op; ``corrupt`` inflates the largest analytic entry
    by 10% as a negative control."""
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}; choose from {', '.join(OPS)}")
    out_fn, readout, grad_fn, default_inputs, tol = OPS[op](seed, dim)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in (inputs or default_inputs).items()}
    analytic = {k: np.array(v, dtype=np.float64) for k, v in grad_fn(inputs).items()}
    if corrupt:
        group = next(iter(analytic))
        g = analytic[group]
        i = np.unravel_index(int(np.argmax(np.abs(g))), g.shape)
        g[i] *= 1.1
    numeric = {k: numeric_gradient(out_fn, readout, inputs, k, h) for k in analytic}
    err, group, index = compare(analytic, numeric)
    return GradCheckResult(op, err, group, index, sum(v.size for v in analytic.values()), tol)


# ---------------------------------------------------------------------------
# op registry: each builder returns (output fn, readout, analytic gradient, inputs, tolerance)


def _attn(d, prefix="") -> AttentionParams:
    return AttentionParams(d[prefix + "Wq"], d[prefix + "Wk"], d[prefix + "Wv"], d.get(prefix + "Wo"))


def _rand_attn(rng, dim, with_o=True) -> dict:
    out = {k: rng.standard_normal((dim, dim)) / np.sqrt(dim) for k in ("Wq", "Wk", "Wv")}
    if with_o:
        out["Wo"] = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    return out


def _op_linear(seed, dim):
    rng = np.random.default_rng([seed, 10])
    dp = dim + 2
    inputs = {"F_p": rng.standard_normal(dp), "F_cp": rng.standard_normal(dim),
              "W": rng.standard_normal((dim, dp + dim)) / np.sqrt(dp + dim), "b": rng.standard_normal(dim)}
    r = rng.standard_normal(dim)

    def out(d):
        return L.fuse_final(d["F_p"], d["F_cp"], d["W"], d["b"])

    def g(d):
        _, c = L.fuse_final_fwd(d["F_p"], d["F_cp"], d["W"], d["b"])
        return L.fuse_final_bwd(c, r)
    return out, r, g, inputs, LINEAR_TOL


def _op_attention(seed, dim):
    rng = np.random.default_rng([seed, 11])
    inputs = {"Xq": rng.standard_normal((3, dim)), "Xkv": rng.standard_normal((5, dim)),
              **_rand_attn(rng, dim, with_o=False)}
    R = rng.standard_normal((3, dim))

    def out(d):
        return L.attention_fwd(d["Xq"], d["Xkv"], _attn(d))[0]

    def g(d):
        _, c = L.attention_fwd(d["Xq"], d["Xkv"], _attn(d))
        return L.attention_bwd(c, R)
    return out, R, g, inputs, NONLINEAR_TOL


def _op_local(seed, dim):
    rng = np.random.default_rng([seed, 12])
    inputs = {"weights": 1.0 + 0.5 * rng.standard_normal(4), "tokens": rng.standard_normal((4, dim)),
              **_rand_attn(rng, dim)}

    def out(d):
        F = L.local_feature(d["tokens"], d["weights"], _attn(d))
        return F @ F

    def g(d):
        F, c = L.local_feature_fwd(d["tokens"], d["weights"], _attn(d))
        return L.local_feature_bwd(c, 2.0 * F)
    return out, 1.0, g, inputs, NONLINEAR_TOL


def _op_fuse_lg(seed, dim):
    rng = np.random.default_rng([seed, 13])
    inputs = {"F_l": rng.standard_normal(dim), "F_g": rng.standard_normal(dim), **_rand_attn(rng, dim)}
    r = rng.standard_normal(dim)

    def out(d):
        return L.fuse_local_global(d["F_l"], d["F_g"], _attn(d))

    def g(d):
        _, c = L.fuse_local_global_fwd(d["F_l"], d["F_g"], _attn(d))
        return L.fuse_local_global_bwd(c, r)
    return out, r, g, inputs, NONLINEAR_TOL


def _op_transform_clip(seed, dim):
    rng = np.random.default_rng([seed, 14])
    dp = dim + 3
    inputs = {"F_c": rng.standard_normal((7, dim)), "F_p": rng.standard_normal(dp),
              "proj": rng.standard_normal((dim, dp)) / np.sqrt(dp), **_rand_attn(rng, dim)}
    r = rng.standard_normal(dim)

    def out(d):
        return L.transform_clip(d["F_c"], d["F_p"], _attn(d), d["proj"])

    def g(d):
        _, c = L.transform_clip_fwd(d["F_c"], d["F_p"], _attn(d), d["proj"])
        return L.transform_clip_bwd(c, r)
    return out, r, g, inputs, NONLINEAR_TOL


def _op_process_text(seed, dim):
    rng = np.random.default_rng([seed, 15])
    inputs = {"F_T": rng.standard_normal(dim), "W": rng.standard_normal((dim, dim)) / np.sqrt(dim),
              "b": rng.standard_normal(dim)}
    r = rng.standard_normal(dim)

    def out(d):
        return L.process_text_fwd(d["F_T"], d["W"], d["b"])[0]

    def g(d):
        _, c = L.process_text_fwd(d["F_T"], d["W"], d["b"])
        return L.process_text_bwd(c, r)
    return out, r, g, inputs, NONLINEAR_TOL


def _op_point_encode(seed, dim):
    rng = np.random.default_rng([seed, 16])
    cloud = rng.random((40, 3)) - 0.5
    inputs = {"W": rng.standard_normal((dim, 3)), "b": 0.1 * rng.standard_normal(dim)}
    r = rng.standard_normal(dim)

    def out(d):
        return L.point_encode_toy(cloud, d["W"], d["b"])

    def g(d):
        _, c = L.point_encode_fwd(cloud, d["W"], d["b"])
        return L.point_encode_bwd(c, r)
    return out, r, g, inputs, NONLINEAR_TOL


def _op_point_decode(seed, dim):
    rng = np.random.default_rng([seed, 17])
    hidden, n_out = 5, 9
    inputs = {"F_D": rng.standard_normal(dim), "W1": rng.standard_normal((hidden, 2 + dim)) / 2,
              "b1": 0.1 * rng.standard_normal(hidden), "W2": rng.standard_normal((3, hidden)) / 2,
              "b2": 0.1 * rng.standard_normal(3)}
    R = rng.standard_normal((n_out, 3))

    def out(d):
        return L.point_decode_toy(d["F_D"], n_out, d["W1"], d["b1"], d["W2"], d["b2"])

    def g(d):
        _, c = L.point_decode_fwd(d["F_D"], n_out, d["W1"], d["b1"], d["W2"], d["b2"])
        return L.point_decode_bwd(c, R)
    return out, R, g, inputs, NONLINEAR_TOL


def _op_chamfer(seed, dim):
    rng = np.random.default_rng([seed, 18])
    gt = rng.random((30, 3))
    inputs = {"pred": rng.random((20, 3))}

    def out(d):
        return chamfer_l2_with_grad(d["pred"], gt)[0]

    def g(d):
        return {"pred": chamfer_l2_with_grad(d["pred"], gt)[1]}
    return out, 1.0, g, inputs, NONLINEAR_TOL


def _fusion_fixture(seed, dim):
    """Random prepared inputs and parameters for the weight-dependent graph."""
    rng = np.random.default_rng([seed, 19])
    params = init_params(seed, dim=dim, point_dim=dim + 2, out_dim=dim, hidden=5)
    tokens = rng.standard_normal((6, 4, dim))
    tokens /= np.linalg.norm(tokens, axis=2, keepdims=True)
    cloud = rng.random((25, 3)) - 0.5
    F_p, pcache = L.point_encode_fwd(cloud, params["point.W"], params["point.b"])
    F_g = rng.standard_normal((6, dim))
    prep = Prepared("fixture", rng.standard_normal(dim), rng.standard_normal(dim), tokens,
                    F_g / np.linalg.norm(F_g, axis=1, keepdims=True), F_p, {"point": pcache})
    gt = rng.random((16, 3)) - 0.5
    return params, prep, gt


def _op_fusion_stack(seed, dim):
    params, prep, gt = _fusion_fixture(seed, dim)
    n_out = 9
    inputs = {"block_weights": 1.0 + 0.3 * np.random.default_rng([seed, 20]).standard_normal((6, 4)),
              "final.W": params["final.W"].copy(), "clip.Wq": params["clip.Wq"].copy(),
              "local.Wk": params["local.Wk"].copy()}

    def bundle(d):
        arrays = dict(params.arrays)
        arrays.update({k: v for k, v in d.items() if k != "block_weights"})
        return FusionParams(arrays)

    def out(d):
        pts, _, _ = run_fusion(prep, bundle(d), BlockWeights(d["block_weights"]), True, n_out)
        return chamfer_l2_with_grad(pts, gt)[0]

    def g(d):
        pts, _, cache = run_fusion(prep, bundle(d), BlockWeights(d["block_weights"]), True, n_out)
        grads = backward(cache, chamfer_l2_with_grad(pts, gt)[1])
        return {k: grads[k] for k in d}
    return out, 1.0, g, inputs, NONLINEAR_TOL


OPS = {
    "linear": _op_linear,
    "attention": _op_attention,
    "local_feature": _op_local,
    "fuse_local_global": _op_fuse_lg,
    "transform_clip": _op_transform_clip,
    "process_text": _op_process_text,
    "point_encode": _op_point_encode,
    "point_decode": _op_point_decode,
    "chamfer_l2": _op_chamfer,
    "fusion_stack": _op_fusion_stack,
}


def check_all(seed: int = 0, dim: int = 6, h: float = DEFAULT_H) -> list[GradCheckResult]:
    return [grad_check(op, seed=seed, dim=dim, h=h) for op in OPS]
