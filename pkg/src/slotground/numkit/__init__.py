"""Small dense-tensor kernel with reverse-mode gradients."""
from .tensor import (Tensor, Params, NonFiniteError, NonDifferentiableError, astensor, param, constant,
                     add, sub, mul, div, neg, power, exp, log, sqrt, tanh, sigmoid, gelu, relu,
                     minimum, maximum, clip, where, step, round_, tsum, mean, matmul, reshape,
                     transpose, swapaxes, getitem, concat, stack, pad2d, softmax, log_softmax,
                     conv2d, backward, grad, value_and_grad)
from .nn import (LN_EPS, softmax_axis, log_softmax_axis, layer_norm, linear, gru_cell, bilinear_upsample,
                 upsample_np, init_gru, init_linear, init_ln)
from .gradcheck import REGISTRY, register_composite, check_grad, finite_difference, GradCheckResult
from .rng import make_rng, derive_seed
from . import serialize
