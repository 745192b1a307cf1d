"""Small numpy network kernel with hand-written backward passes (float64 throughout)."""
from .checkpoint import CheckpointError
from .crf import CrfParams, crf_log_partition, crf_max_marginals, crf_nll_and_grad, crf_viterbi, path_score
from .gradcheck import check_gradients, numeric_grad, rel_error
from .layers import (
    Params,
    add_grads,
    ShapeError,
    dense_backward,
    dense_forward,
    embed_mean_backward,
    embed_mean_forward,
    init_dense,
    init_layer_norm,
    layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    softmax,
    uniform_init,
)
from .lstm import bilstm_backward, bilstm_forward, init_bilstm, lstm_backward, lstm_cell, lstm_forward
from .optim import AdamHyper, AdamState, adam_step, softmax_xent
from .siamese import PairScores, init_siamese, siamese_backward, siamese_forward
from .transformer import init_transformer_block, transformer_block_backward, transformer_block_forward

__all__ = [name for name in dir() if not name.startswith("_")]
