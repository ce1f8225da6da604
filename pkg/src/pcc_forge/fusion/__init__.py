"""Position-aware multimodal fusion at desk scale."""

from .encoders import EncoderHandle, encode_image, encode_text
from .layers import (
    assemble_clip_feature,
    fuse_final,
    fuse_local_global,
    local_feature,
    point_decode_toy,
    point_encode_toy,
    transform_clip,
)
from .model import (
    FusionStageError,
    FusionState,
    forward,
    global_feature,
    prepare,
    prepare_record,
    process_text,
    run_fusion,
)
from .params import AttentionParams, BlockWeights, FusionParams, init_params
from .training import TrainResult, cell_signal, fd_block_grad, train_block_weights
from .gradcheck import GradCheckResult, OPS as GRADCHECK_OPS, check_all, grad_check
