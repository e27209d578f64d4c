from .tensor import (
    DegenerateRowError,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    concat_rows,
    cross_entropy,
    embedding_lookup,
    exp,
    gelu,
    kl_rows,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    parameter,
    precision,
    reshape,
    scale,
    slice_,
    slice_rows,
    softmax_rows,
    sum_,
    take_rows,
    topological_order,
    transpose,
)
from .optim import AdamConfig, AdamState, adam_step, scheduled_lr
from .gradcheck import GradCheckReport, gradcheck, relative_error
from . import container
