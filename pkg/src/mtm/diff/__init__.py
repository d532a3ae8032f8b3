from mtm.diff.array import (
    DegenerateError,
    DiffArray,
    DimensionError,
    Tape,
    add,
    broadcast_to,
    concat,
    constant,
    dropout,
    embedding,
    exp,
    getitem,
    layer_norm,
    linear,
    mask_fill,
    masked_max,
    masked_mean,
    masked_softmax,
    matmul,
    maximum_of,
    mean,
    mul,
    parameter,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    stack,
    sub,
    sum_,
    swapaxes,
    take_rows,
)
from mtm.diff.gradcheck import EvaluationError, GradCheckReport, grad_check
from mtm.diff.kernels import BACKEND
