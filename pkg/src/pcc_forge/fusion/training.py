"""Random-block training schedule for the 24 position-aware weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..corpus import CorpusError, ResolvedRecord
from ..metrics.kdtree import NnIndex
from .encoders import EncoderHandle
from .model import backward, chamfer_l2_with_grad, prepare_record, run_fusion
from .params import N_BLOCKS, N_FACES, BlockWeights, FusionParams


@dataclass
class TraceRow:
    iteration: int
    record_id: str
    face: int
    block: int
    loss: float
    grad: float
    weight: float


@dataclass
class TrainResult:
    weights: BlockWeights
    trace: list

    def trace_csv(self) -> str:
        lines = ["iteration,record_id,face,block,loss,grad,weight"]
        lines += [f"{r.iteration},{r.record_id},{r.face},{r.block},{r.loss!r},{r.grad!r},{r.weight!r}"
                  for r in self.trace]
        return "\n".join(lines) + "\n"


def active_weights(trained: np.ndarray, face: int, block: int) -> BlockWeights:
    """All weights at the default 1 except the one being learned."""
    w = np.ones((N_FACES, N_BLOCKS))
    w[face, block] = trained[face, block]
    return BlockWeights(w)


def block_loss_and_grad(prep, gt_index: NnIndex, params: FusionParams, weights: BlockWeights,
                        n_out: int) -> tuple[float, np.ndarray]:
    """Chamfer-L2 loss of one prediction and its gradient w.r.t. all 24 weights."""
    pts, _, cache = run_fusion(prep, params, weights, True, n_out)
    loss, d_pts = chamfer_l2_with_grad(pts, gt_index)
    return loss, backward(cache, d_pts)["block_weights"]


def fd_block_grad(prep, gt_index: NnIndex, params: FusionParams, trained: np.ndarray,
                  face: int, block: int, n_out: int, h: float = 1e-5) -> tuple[float, float]:
    """Loss and central-difference derivative w.r.t. the single active weight."""
    w = trained.copy()
    orig = w[face, block]
    vals = []
    for x in (orig + h, orig - h):
        w[face, block] = x
        pts, _, _ = run_fusion(prep, params, active_weights(w, face, block), True, n_out)
        vals.append(chamfer_l2_with_grad(pts, gt_index)[0])
    pts, _, _ = run_fusion(prep, params, active_weights(trained, face, block), True, n_out)
    loss = chamfer_l2_with_grad(pts, gt_index)[0]
    return loss, (vals[0] - vals[1]) / ((orig + h) - (orig - h))


def train_block_weights(records, params: FusionParams, image_encoder: EncoderHandle,
                        text_encoder: EncoderHandle | None = None, iters: int = 200,
                        step: float = 1.0, seed: int = 42, n_out: int = 256,
                        init: BlockWeights | None = None, gradient: str = "analytic",
                        inpaint_iters: int = 1000) -> TrainResult:
    """Each iteration draws (record, face, block); only that weight is active
    in the forward pass and only it is updated by gradient descent. All
    learned weights are kept and returned together.

    ``gradient="fd"`` replaces backpropagation by central differences on the
    active weight; it is the oracle for the analytic run.
    """
    if gradient not in ("analytic", "fd"):
        raise ValueError("gradient must be 'analytic' or 'fd'")
    records = list(records)
    if not records:
        raise CorpusError("training needs at least one record")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    missing = [r.id for r in records if isinstance(r, ResolvedRecord) and not r.record.gt_cloud_path]
    if missing:
        raise CorpusError(f"records without ground truth: {', '.join(missing)}")

    cache = {}

    def get(i):
        if i not in cache:
            rec = records[i]
            cache[i] = (prepare_record(rec, params, image_encoder, text_encoder,
                                       inpaint_iters=inpaint_iters),
                        NnIndex(rec.load_gt()))
        return cache[i]

    trained = (init or BlockWeights.ones()).w.copy()
    rng = np.random.default_rng(seed)
    trace = []
    for it in range(iters):
        i = int(rng.integers(len(records)))
        face = int(rng.integers(N_FACES))
        block = int(rng.integers(N_BLOCKS))
        prep, gt_index = get(i)
        if gradient == "fd":
            loss, g = fd_block_grad(prep, gt_index, params, trained, face, block, n_out)
        else:
            loss, grad = block_loss_and_grad(prep, gt_index, params,
                                             active_weights(trained, face, block), n_out)
            g = float(grad[face, block])
        trained[face, block] -= step * g
        trace.append(TraceRow(it, records[i].id, face, block, loss, g, float(trained[face, block])))
    return TrainResult(BlockWeights(trained), trace)


def cell_signal(weights: BlockWeights, cells) -> tuple[float, float]:
    """``(mean |w-1| over cells, mean |w-1| over the other cells)``."""
    dev = np.abs(weights.w - 1.0)
    mask = np.zeros(dev.shape, dtype=bool)
    for face, block in cells:
        mask[face, block] = True
    return float(dev[mask].mean()), float(dev[~mask].mean())
