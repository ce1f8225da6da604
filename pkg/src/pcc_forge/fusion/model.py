"""End-to-end fusion graph: encoders -> position-aware fusion -> toy decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..cloud import PointCloud
from ..corpus import ResolvedRecord
from ..metrics.kdtree import NnIndex
from ..projection import DepthMap, Face, inpaint_naive
from . import layers as L
from .encoders import EncoderHandle, encode_image, encode_text
from .params import BlockWeights, FusionParams

DEFAULT_N_OUT = 2048


class FusionStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class FusionState:
    """Every named feature of one forward pass (per-view arrays are ``(6, D)``)."""

    F_T: np.ndarray
    F_t: np.ndarray
    F_g: np.ndarray
    F_l: np.ndarray
    F_f: np.ndarray
    F_c: np.ndarray
    F_c_prime: np.ndarray
    F_p: np.ndarray
    F_D: np.ndarray

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("F_T", "F_t", "F_g", "F_l", "F_f", "F_c", "F_c_prime", "F_p", "F_D")}


@dataclass
class Prepared:
    """Weight-independent inputs of the fusion graph for one record."""

    record_id: str
    F_T: np.ndarray
    F_t: np.ndarray
    tokens: np.ndarray  # (6, 4, D)
    F_g: np.ndarray  # (6, D)
    F_p: np.ndarray
    caches: dict = field(default_factory=dict, repr=False)


def process_text(F_T: np.ndarray, params: FusionParams) -> np.ndarray:
    return L.process_text_fwd(F_T, params["text.W"], params["text.b"])[0]


def global_feature(handle: EncoderHandle, inpainted: DepthMap, record_id=None) -> np.ndarray:
    return encode_image(handle, inpainted, record_id, variant="global")[0]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FusionStageError:
        raise
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        raise FusionStageError(name, exc) from exc


def prepare(text: str, maps, cloud, params: FusionParams, image_encoder: EncoderHandle,
            text_encoder: EncoderHandle | None = None, inpainted=None, record_id=None,
            inpaint_iters: int = 1000) -> Prepared:
    """Run every stage that does not depend on the block weights."""
    text_encoder = text_encoder or image_encoder
    maps = list(maps)
    if len(maps) != 6:
        raise FusionStageError("load_maps", ValueError(f"expected six maps, got {len(maps)}"))
    F_T = _stage("encode_text", encode_text, text_encoder, text, record_id)
    F_t = _stage("process_text", process_text, F_T, params)
    tokens, F_g = [], []
    for face, dmap in zip(Face, maps):
        tokens.append(_stage(f"encode_image[{face.label}]", encode_image, image_encoder, dmap, record_id)[1])
        if inpainted is not None and inpainted[int(face)] is not None:
            filled = inpainted[int(face)]
        else:
            filled = _stage(f"inpaint[{face.label}]", inpaint_naive, dmap, inpaint_iters)
        F_g.append(_stage(f"global_feature[{face.label}]", global_feature, image_encoder, filled, record_id))
    F_p, pcache = _stage("point_encode", L.point_encode_fwd, cloud, params["point.W"], params["point.b"])
    return Prepared(record_id or "", F_T, F_t, np.stack(tokens), np.stack(F_g), F_p, {"point": pcache})


def prepare_record(record: ResolvedRecord, params, image_encoder, text_encoder=None,
                   inpainted=None, inpaint_iters: int = 1000) -> Prepared:
    maps = _stage("load_maps", record.load_maps)
    cloud = _stage("load_cloud", record.load_cloud)
    return prepare(record.record.text, maps, cloud, params, image_encoder, text_encoder,
                   inpainted, record.id, inpaint_iters)


def run_fusion(prep: Prepared, params: FusionParams, weights: BlockWeights | None = None,
               position_aware: bool = True, n_out: int = DEFAULT_N_OUT):
    """Weight-dependent part of the graph. Returns ``(points, state, cache)``.

    ``position_aware=False`` skips the block weighting entirely; with all
    weights equal to 1 both paths produce identical bits.
    """
    p_local = params.attention("local")
    p_fuse = params.attention("fuse")
    p_clip = params.attention("clip")
    if position_aware:
        w = (weights or BlockWeights.ones()).w
    F_l, F_f, c_local, c_fuse = [], [], [], []
    for v in range(6):
        fl, cl = _stage("local_feature", L.local_feature_fwd, prep.tokens[v],
                        w[v] if position_aware else None, p_local)
        ff, cf = _stage("fuse_local_global", L.fuse_local_global_fwd, fl, prep.F_g[v], p_fuse)
        F_l.append(fl)
        F_f.append(ff)
        c_local.append(cl)
        c_fuse.append(cf)
    F_c = _stage("assemble_clip_feature", L.assemble_clip_feature, F_f, prep.F_t)
    proj = params["point.proj"] if "point.proj" in params else None
    F_cp, c_clip = _stage("transform_clip", L.transform_clip_fwd, F_c, prep.F_p, p_clip, proj)
    F_D, c_final = _stage("fuse_final", L.fuse_final_fwd, prep.F_p, F_cp,
                          params["final.W"], params["final.b"])
    pts, c_dec = _stage("point_decode", L.point_decode_fwd, F_D, n_out, params["dec.W1"],
                        params["dec.b1"], params["dec.W2"], params["dec.b2"])
    state = FusionState(prep.F_T, prep.F_t, prep.F_g, np.stack(F_l), np.stack(F_f), F_c, F_cp, prep.F_p, F_D)
    cache = {"local": c_local, "fuse": c_fuse, "clip": c_clip, "final": c_final, "dec": c_dec,
             "position_aware": position_aware, "prep": prep}
    return pts, state, cache


def backward(cache: dict, d_points: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. the block weights and every parameter
    downstream of the encoders, given ``d loss / d points``."""
    g = {}
    gd = L.point_decode_bwd(cache["dec"], d_points)
    for k in ("W1", "b1", "W2", "b2"):
        g[f"dec.{k}"] = gd[k]
    gf = L.fuse_final_bwd(cache["final"], gd["F_D"])
    g["final.W"], g["final.b"] = gf["W"], gf["b"]
    gc = L.transform_clip_bwd(cache["clip"], gf["F_cp"])
    for k in ("Wq", "Wk", "Wv", "Wo"):
        g[f"clip.{k}"] = gc[k]
    if "proj" in gc:
        g["point.proj"] = gc["proj"]
    dF_p = gf["F_p"] + gc["F_p"]
    gp = L.point_encode_bwd(cache["prep"].caches["point"], dF_p)
    g["point.W"], g["point.b"] = gp["W"], gp["b"]

    dw = np.zeros((6, 4))
    for k in ("Wq", "Wk", "Wv", "Wo"):
        g[f"fuse.{k}"] = 0.0
        g[f"local.{k}"] = 0.0
    for v in range(6):
        gl = L.fuse_local_global_bwd(cache["fuse"][v], gc["F_c"][v])
        gw = L.local_feature_bwd(cache["local"][v], gl["F_l"])
        dw[v] = gw["weights"]
        for k in ("Wq", "Wk", "Wv", "Wo"):
            g[f"fuse.{k}"] = g[f"fuse.{k}"] + gl[k]
            g[f"local.{k}"] = g[f"local.{k}"] + gw[k]
    g["block_weights"] = dw
    return g


def forward(record: ResolvedRecord, params: FusionParams, image_encoder: EncoderHandle,
            text_encoder: EncoderHandle | None = None, weights: BlockWeights | None = None,
            position_aware: bool = True, n_out: int = DEFAULT_N_OUT, inpainted=None):
    """Full pass for one corpus record: ``(prediction cloud, FusionState)``."""
    prep = prepare_record(record, params, image_encoder, text_encoder, inpainted)
    pts, state, _ = run_fusion(prep, params, weights, position_aware, n_out)
    return PointCloud(pts), state


# ---------------------------------------------------------------------------
# loss


def chamfer_l2_with_grad(pred: np.ndarray, gt) -> tuple[float, np.ndarray]:
    """Half-sum L2 Chamfer distance and its gradient w.r.t. ``pred``
    (nearest-neighbour assignments held fixed)."""
    gt_pts = gt.points if isinstance(gt, NnIndex) else np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    gt_index = gt if isinstance(gt, NnIndex) else NnIndex(gt_pts)
    pred_index = NnIndex(pred)
    i_pg, d_pg = gt_index.query(pred)
    i_gp, d_gp = pred_index.query(gt_pts)
    n_p, n_g = pred.shape[0], gt_pts.shape[0]
    loss = 0.5 * (d_pg.sum() / n_p + d_gp.sum() / n_g)
    grad = (pred - gt_pts[i_pg]) / n_p
    np.add.at(grad, i_gp, (pred[i_gp] - gt_pts) / n_g)
    return float(loss), grad
