"""Minimal reverse-mode tensor engine, Adam, gradient checking and checkpoints."""

from cpgc.autodiff.checkpoint import load_checkpoint, save_checkpoint, tensors_digest
from cpgc.autodiff.gradcheck import analytic_grads, finite_diff_check
from cpgc.autodiff.optim import Adam, AdamState, adam_step
from cpgc.autodiff.tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    clamp,
    concat,
    div,
    elementwise,
    exp,
    getitem,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    norm,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
    take_rows,
    tanh,
    tmax,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
