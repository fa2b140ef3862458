from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concatenate,
    conv2d,
    conv_transpose2d,
    div,
    exp,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stop_gradient,
    sub,
    sum_,
    take,
    tanh,
    topological_order,
    transpose,
)
from .nn import MLP, Conv2d, ConvTranspose2d, Linear, Module
from .optim import Adam
from .gradcheck import numerical_gradient, relative_error
