from .checkpoint import load as load_checkpoint, params_sha256, save as save_checkpoint
from .gradcheck import grad_check, numerical_grad
from .optim import Adam, AdamState, adam_update
from .tensor import (
    Graph,
    Tensor,
    add,
    as_tensor,
    attention,
    backward,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    group_norm,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid_np,
    silu,
    softmax,
    sqrt,
    square,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
    upsample2x,
)
