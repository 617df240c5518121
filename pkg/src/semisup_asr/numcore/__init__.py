"""Dense float64 tensors, reverse-mode autodiff, optimizers and checkpoints."""

from . import functional
from .checkpoint import load_arrays, save_arrays, save_checkpoint, split_groups
from .gradcheck import GradCheckError, grad_check
from .module import Module, Parameter, init_param, truncated_normal
from .optim import (
    EmaState,
    Optimizer,
    OptimizerConfig,
    OptimizerError,
    adafactor_step,
    adam_step,
    clip_global_norm,
    ema_update,
    factored_second_moment,
    global_norm,
    second_moment_size,
    transformer_lr,
)
from .rng import derive_seed, make_rng
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    einsum,
    exp,
    is_grad_enabled,
    log,
    make_op,
    matmul,
    no_grad,
    pad_axis,
    relu,
    sigmoid,
    stack,
    swish,
    tanh,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
