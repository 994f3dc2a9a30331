"""Fully connected and spectral graph-convolution layers."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from retarget.mesh import Mesh, mesh_edges
from retarget.nn.tensor import Tensor, add, laplacian_apply, matmul, mul, sub, tanh

_LAMBDA_MAX_PAD = 1.01
_POWER_SEED = 0x9E3779B9


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ScaledLaplacian:
    """Symmetric normalized graph Laplacian rescaled to spectrum ~[-1, 1].

    Built from mesh connectivity: L = I - D^-1/2 A D^-1/2, then
    Ls = 2 L / lambda_max - I. The top eigenvalue is estimated with a
    seeded Lanczos solve and padded by 1%; plain power iteration
    converges too slowly on mesh graphs (clustered top eigenvalues) and
    can underestimate, which would push the scaled spectrum past 1.
    """

    def __init__(self, mesh: Mesh):
        edges = mesh_edges(mesh)
        V = mesh.vertex_count
        i, j = edges[:, 0], edges[:, 1]
        deg = np.zeros(V)
        np.add.at(deg, i, 1.0)
        np.add.at(deg, j, 1.0)
        inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1.0))
        vals = -inv_sqrt[i] * inv_sqrt[j]
        rows = np.concatenate([i, j, np.arange(V)])
        cols = np.concatenate([j, i, np.arange(V)])
        data = np.concatenate([vals, vals, np.where(deg > 0, 1.0, 0.0)])
        L = sp.csr_matrix((data, (rows, cols)), shape=(V, V))

        if V <= 64:
            lam = float(np.linalg.eigvalsh(L.toarray()).max())
        else:
            rng = np.random.Generator(np.random.Philox(key=np.uint64(_POWER_SEED)))
            v0 = rng.normal(size=V)
            lam = float(spla.eigsh(L, k=1, which="LA", v0=v0, return_eigenvectors=False)[0])
        self.lambda_max = lam * _LAMBDA_MAX_PAD
        scaled = (L * (2.0 / self.lambda_max) - sp.identity(V, format="csr")).tocsr()
        self.vertex_count = V
        self._mats = {np.dtype(np.float64): scaled.astype(np.float64)}

    def matrix(self, dtype) -> sp.csr_matrix:
        dt = np.dtype(dtype)
        if dt not in self._mats:
            self._mats[dt] = self._mats[np.dtype(np.float64)].astype(dt)
        return self._mats[dt]


class Dense:
    """y = activation(x @ W + b), activation in {'tanh', 'linear'}."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, activation: str = "tanh", dtype=np.float32):
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = Tensor(glorot(rng, fan_in, fan_out, (fan_in, fan_out), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = add(matmul(x, self.weight), self.bias)
        return tanh(y) if self.activation == "tanh" else y

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def spec(self) -> dict:
        return {"kind": "dense", "in": self.weight.shape[0], "out": self.weight.shape[1], "activation": self.activation}


class ChebConv:
    """Chebyshev spectral graph convolution of order K.

    y = sum_k T_k(Ls) x Theta_k with the recurrence T_0 = I, T_1 = Ls,
    T_k = 2 Ls T_{k-1} - T_{k-2}, plus a per-channel bias.
    """

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, order: int = 3, activation: str = "tanh", dtype=np.float32):
        if order < 1:
            raise ValueError("Chebyshev order must be >= 1")
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.order = order
        self.activation = activation
        self.theta = [
            Tensor(glorot(rng, fan_in * order, fan_out, (fan_in, fan_out), dtype), requires_grad=True)
            for _ in range(order)
        ]
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, lap: ScaledLaplacian) -> Tensor:
        # Vertex axis first: (V, Fin) or vertex-major batches (V, B, Fin).
        if x.shape[0] != lap.vertex_count:
            raise ValueError(f"vertex axis {x.shape[0]} does not match operator size {lap.vertex_count}")
        if x.shape[-1] != self.theta[0].shape[0]:
            raise ValueError(f"feature axis {x.shape[-1]} does not match layer input {self.theta[0].shape[0]}")
        basis_prev = x
        y = matmul(basis_prev, self.theta[0])
        if self.order > 1:
            basis = laplacian_apply(lap, x)
            y = add(y, matmul(basis, self.theta[1]))
            for k in range(2, self.order):
                nxt = sub(mul(laplacian_apply(lap, basis), 2.0), basis_prev)
                basis_prev, basis = basis, nxt
                y = add(y, matmul(basis, self.theta[k]))
        y = add(y, self.bias)
        return tanh(y) if self.activation == "tanh" else y

    def params(self) -> list[Tensor]:
        return [*self.theta, self.bias]

    def spec(self) -> dict:
        return {
            "kind": "cheb",
            "in": self.theta[0].shape[0],
            "out": self.theta[0].shape[1],
            "order": self.order,
            "activation": self.activation,
        }
