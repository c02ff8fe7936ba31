from .optim import Optimizer, OptimState
from .tensor import (
    ContractError,
    DimensionError,
    LabelError,
    NumericInputError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cosine_matrix,
    cosine_similarity,
    cross_entropy,
    exp,
    gelu,
    grad_enabled,
    kd_loss,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    softmax,
    take,
    transpose,
    tsum,
)
from .gradcheck import gradcheck, numeric_grad
