from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad
from .ops import (add, add_channel_bias, clamp, concat, exp, getitem, linear, log, matmul,
                  mean, mul, neg, relu, reshape, sigmoid, softmax, stack, sub, sum, tanh,
                  transpose)
from .volume import conv3d, group_norm, maxpool3d, upsample_nearest3d
from .gradcheck import check_gradients, numerical_grad, relative_error

__all__ = [
    "Tensor", "as_tensor", "is_grad_enabled", "no_grad",
    "add", "add_channel_bias", "clamp", "concat", "exp", "getitem", "linear", "log",
    "matmul", "mean", "mul", "neg", "relu", "reshape", "sigmoid", "softmax", "stack",
    "sub", "sum", "tanh", "transpose",
    "conv3d", "group_norm", "maxpool3d", "upsample_nearest3d",
    "check_gradients", "numerical_grad", "relative_error",
]
