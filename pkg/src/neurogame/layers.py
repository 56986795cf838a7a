"""Trainable and stateless layers with hand-written backward passes.

Every layer exposes ``forward(x, training, iteration)``, ``backward(grad)``,
``params`` / ``grads`` dicts of arrays, ``buffers`` for non-trainable state
and ``output_shape(input_shape)`` for shape walking. Shapes exclude the batch
axis in ``output_shape``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Layer:
    frozen = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, training: bool = False, iteration: float = 1) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "he", dtype=np.float32):
        super().__init__()
        if init == "he":
            w = T.he_uniform(rng, (n_in, n_out), n_in)
        else:
            w = T.xavier_uniform(rng, (n_in, n_out), n_in, n_out)
        self.params = {"W": w.astype(dtype), "b": np.zeros(n_out, dtype=dtype)}
        self.n_out = n_out

    def forward(self, x, training=False, iteration=1):
        self._x = x
        return T.dense(x, self.params["W"], self.params["b"])

    def backward(self, grad):
        self.grads = {"W": self._x.T @ grad, "b": grad.sum(axis=0)}
        return grad @ self.params["W"].T

    def output_shape(self, input_shape):
        return (self.n_out,)


class Conv2D(Layer):
    def __init__(self, n_in: int, n_filters: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        # He scaling for the effective (channel-averaged) kernel, hence the extra n_in
        w = n_in * T.he_uniform(rng, (n_filters, kernel, kernel, n_in), kernel * kernel * n_in)
        self.params = {"W": w.astype(dtype), "b": np.zeros(n_filters, dtype=dtype)}
        self.kernel = kernel
        self.n_filters = n_filters

    def forward(self, x, training=False, iteration=1):
        self._x = x
        return T.conv2d(x, self.params["W"], bias=self.params["b"])

    def backward(self, grad):
        dx, dw, db = T.conv2d_backward(self._x, self.params["W"], grad)
        self.grads = {"W": dw, "b": db}
        return dx

    def output_shape(self, input_shape):
        h, w, _ = input_shape
        return (h - self.kernel + 1, w - self.kernel + 1, self.n_filters)


class ReLU(Layer):
    def forward(self, x, training=False, iteration=1):
        self._pos = x > 0
        return T.relu(x)

    def backward(self, grad):
        return grad * self._pos


class Sigmoid(Layer):
    def forward(self, x, training=False, iteration=1):
        self._y = T.sigmoid(x)
        return self._y

    def backward(self, grad):
        return grad * self._y * (1 - self._y)


class BatchNorm(Layer):
    """Batch normalisation over the last axis of (N, D) inputs."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.params = {"gamma": np.ones(dim, dtype=dtype), "beta": np.zeros(dim, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(dim, dtype=dtype), "running_var": np.ones(dim, dtype=dtype)}
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training=False, iteration=1):
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if not self.frozen:
                m = self.momentum
                self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
                self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        self._training = training
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv_std
        return self.params["gamma"] * self._xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std, gamma = self._xhat, self._inv_std, self.params["gamma"]
        self.grads = {"gamma": (grad * xhat).sum(axis=0), "beta": grad.sum(axis=0)}
        dxhat = grad * gamma
        if not self._training:
            return dxhat * inv_std
        n = grad.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, training=False, iteration=1):
        if not training or self.rate == 0:
            self._mask = None
            return x
        if not (self.frozen and self._mask is not None and self._mask.shape == x.shape):
            keep = self.rng.random(x.shape) >= self.rate
            self._mask = (keep / (1 - self.rate)).astype(x.dtype)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class MaxPool(Layer):
    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x, training=False, iteration=1):
        self._shape = x.shape
        out, self._idx = T.maxpool2d(x, self.size)
        return out

    def backward(self, grad):
        return T.maxpool2d_backward(grad, self._idx, self._shape, self.size)

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (h // self.size, w // self.size, c)


class Flatten(Layer):
    """Channel-major, then row-major flattening of (N, H, W, C)."""

    def forward(self, x, training=False, iteration=1):
        self._shape = x.shape
        if x.ndim == 2:
            return x
        return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1)

    def backward(self, grad):
        if len(self._shape) == 2:
            return grad
        n, h, w, c = self._shape
        return grad.reshape(n, c, h, w).transpose(0, 2, 3, 1)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)
