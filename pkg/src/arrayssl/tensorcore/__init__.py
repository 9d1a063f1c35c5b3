from .functional import (
    BatchNormState,
    avg_pool2d,
    batch_norm,
    conv1d,
    conv2d,
    conv_transpose2d,
    nearest_upsample2d,
    se_hidden,
    squeeze_excite,
)
from .gradcheck import GradCheckReport, grad_check, numerical_grad
from .optim import Adam, AdamState, adam_step
from .tensor import (
    DiffTensor,
    add,
    concat,
    div,
    exp,
    is_grad_enabled,
    linear,
    log,
    mean,
    mse,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    square,
    squeeze,
    sub,
    tensor_sum,
    trace_kinks,
    transpose,
    unsqueeze,
)
