"""Dense kernels, reverse-mode differentiation, optimization and PCA."""

from graphssl.ndops.autodiff import (
    DiffValue,
    NonFiniteError,
    ShapeError,
    abs_elem,
    add,
    add_bias,
    bce_with_logits,
    const,
    dropout,
    log_softmax,
    matmul,
    mse,
    param,
    relu,
    scale,
    softmax,
    softmax_cross_entropy,
    sparse_dropout_matmul,
    spmm,
    sub_elem,
    take_rows,
    total,
)
from graphssl.ndops.linalg import cosine_matrix, cosine_sim, pca_reduce, top_eigvecs
from graphssl.ndops.logreg import LogisticRegression
from graphssl.ndops.optim import AdamState, adam_step, glorot_init

__all__ = [
    "AdamState", "DiffValue", "LogisticRegression", "NonFiniteError", "ShapeError",
    "abs_elem", "adam_step", "add", "add_bias", "bce_with_logits", "const", "cosine_matrix",
    "cosine_sim", "dropout", "glorot_init", "log_softmax", "matmul", "mse", "param",
    "pca_reduce", "relu", "scale", "softmax", "softmax_cross_entropy", "sparse_dropout_matmul", "spmm", "sub_elem",
    "take_rows", "top_eigvecs", "total",
]
