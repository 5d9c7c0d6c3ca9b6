from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LabelOutOfRange, bce_with_logits, masked_cross_entropy
from .optim import AdamState, StepSchedule, adam_step
from .rng import DropoutStream, SplitMix64, derive_seed
from .tensor import (
    BatchNormStats,
    NotScalarLoss,
    ShapeMismatch,
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    bmm,
    concat,
    dropout,
    edge_message,
    gather,
    layer_norm,
    linear,
    matmul,
    pad_segments,
    mul,
    parameter,
    reduce_sum,
    relu,
    reshape,
    row_normalize,
    segment_mean,
    slice_cols,
    softmax,
    sub,
    swap_last,
    transpose,
    unpad_segments,
)

