from retarget.nn.tensor import Tensor, matmul, tanh, relu, tensor_sum, tensor_mean, l2norm, laplacian_apply
from retarget.nn.layers import Dense, ChebConv, ScaledLaplacian, glorot
from retarget.nn.optim import Adam
from retarget.nn.checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "Tensor",
    "matmul",
    "tanh",
    "relu",
    "tensor_sum",
    "tensor_mean",
    "l2norm",
    "laplacian_apply",
    "Dense",
    "ChebConv",
    "ScaledLaplacian",
    "glorot",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]
