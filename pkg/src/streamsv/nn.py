"""Dense-tensor NN core: layers with explicit forward/backward, inits, grad checks.

All math runs in double precision. A layer caches its forward input and
consumes it on backward; calling backward without a pending forward raises.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import StreamSVError
from .features import InputTooShort


class ShapeMismatch(StreamSVError):
    pass


class BackwardBeforeForward(StreamSVError):
    pass


class Parameter:
    """A trainable tensor and its accumulated gradient (same dims, always)."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class ParameterSet:
    """Named map of parameters; names are unique, gradients mirror value dims."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, param: Parameter) -> Parameter:
        if name in self._params:
            raise StreamSVError(f"duplicate parameter name {name!r}")
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0


def init_constant(dims, c: float) -> np.ndarray:
    return np.full(tuple(dims), float(c), dtype=np.float64)


def init_kaiming_normal(dims, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He init for ReLU stacks: Normal(0, 2/fan_in)."""
    if fan_in < 1:
        raise StreamSVError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(dims))


def init_xavier_uniform(dims, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot init: Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise StreamSVError(f"fan_in/fan_out must be >= 1, got {fan_in}/{fan_out}")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=tuple(dims))


class Layer:
    """Base layer: forward caches its input, backward consumes the cache."""

    kind = "base"

    def __init__(self):
        self._cached_input: np.ndarray | None = None

    def parameters(self) -> list[tuple[str, Parameter]]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = self._forward(x)
        self._cached_input = x
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cached_input is None:
            raise BackwardBeforeForward(f"{self.kind}: backward called without a forward")
        x = self._cached_input
        self._cached_input = None
        return self._backward(x, np.asarray(grad_out, dtype=np.float64))

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, x, grad_out):
        raise NotImplementedError


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x):
        return np.maximum(x, 0.0)

    def _backward(self, x, grad_out):
        return grad_out * (x > 0.0)


class Linear(Layer):
    """y = x @ W + b over the last axis; leading axes are batch-like."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int, w=None, b=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.w = Parameter(w if w is not None else np.zeros((in_features, out_features)))
        self.b = Parameter(b if b is not None else np.zeros(out_features))
        if self.w.shape != (in_features, out_features):
            raise ShapeMismatch(f"linear W: expected {(in_features, out_features)}, got {self.w.shape}")

    def parameters(self):
        return [("W", self.w), ("b", self.b)]

    def _forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeMismatch(
                f"linear: expected last dim {self.in_features}, got input shape {x.shape}"
            )
        return x @ self.w.value + self.b.value

    def _backward(self, x, grad_out):
        x2 = x.reshape(-1, self.in_features)
        g2 = grad_out.reshape(-1, self.out_features)
        self.w.grad += x2.T @ g2
        self.b.grad += g2.sum(axis=0)
        return grad_out @ self.w.value.T


class Conv2d(Layer):
    """Valid cross-correlation, square stride, input (N, C_in, H, W)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.w = Parameter(np.zeros((out_channels, in_channels, kernel, kernel)))
        self.b = Parameter(np.zeros(out_channels))

    def parameters(self):
        return [("W", self.w), ("b", self.b)]

    def _out_size(self, n: int) -> int:
        return (n - self.kernel) // self.stride + 1

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"conv2d: expected (N, {self.in_channels}, H, W), got {x.shape}"
            )
        if x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise ShapeMismatch(
                f"conv2d: input {x.shape[2]}x{x.shape[3]} smaller than kernel {self.kernel}"
            )

    def _forward(self, x):
        self._check(x)
        n, _, h, w = x.shape
        ho, wo = self._out_size(h), self._out_size(w)
        s, k = self.stride, self.kernel
        out = np.zeros((n, ho, wo, self.out_channels))
        for di in range(k):
            for dj in range(k):
                xs = x[:, :, di : di + s * ho : s, dj : dj + s * wo : s]
                # (N, C_in, Ho, Wo) . (C_out, C_in) -> (N, Ho, Wo, C_out)
                out += np.tensordot(xs, self.w.value[:, :, di, dj], axes=([1], [1]))
        out += self.b.value
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _backward(self, x, grad_out):
        n, _, h, w = x.shape
        ho, wo = self._out_size(h), self._out_size(w)
        if grad_out.shape != (n, self.out_channels, ho, wo):
            raise ShapeMismatch(
                f"conv2d backward: expected grad {(n, self.out_channels, ho, wo)}, got {grad_out.shape}"
            )
        s, k = self.stride, self.kernel
        dx = np.zeros_like(x)
        self.b.grad += grad_out.sum(axis=(0, 2, 3))
        for di in range(k):
            for dj in range(k):
                xs = x[:, :, di : di + s * ho : s, dj : dj + s * wo : s]
                # dW[o,c] = sum_{n,i,j} g[n,o,i,j] * x[n,c,si+di,sj+dj]
                self.w.grad[:, :, di, dj] += np.tensordot(
                    grad_out, xs, axes=([0, 2, 3], [0, 2, 3])
                )
                # (N, C_out, Ho, Wo) . (C_out, C_in) -> (N, Ho, Wo, C_in)
                dxs = np.tensordot(grad_out, self.w.value[:, :, di, dj], axes=([1], [0]))
                dx[:, :, di : di + s * ho : s, dj : dj + s * wo : s] += dxs.transpose(0, 3, 1, 2)
        return dx


class TemporalMeanPool(Layer):
    """Mean over the time axis (second to last): (..., T, D) -> (..., D)."""

    kind = "temporal_mean_pool"

    def _forward(self, x):
        if x.ndim < 2:
            raise ShapeMismatch(f"temporal_mean_pool: need rank >= 2, got shape {x.shape}")
        return x.mean(axis=-2)

    def _backward(self, x, grad_out):
        t = x.shape[-2]
        return np.broadcast_to(np.expand_dims(grad_out / t, -2), x.shape).copy()


class Encoder:
    """Reference per-stream encoder mapping (N, T, n_mels) features to embeddings.

    conv2d(1->16, 3x3, stride 2) -> relu -> conv2d(16->32, 3x3, stride 2)
    -> relu -> per-frame flatten -> linear(->D) -> temporal mean pool
    -> linear(D->D). The flatten is a pure reshape handled here, with a
    matching reshape on the backward path.
    """

    CONV1_CH = 16
    CONV2_CH = 32
    KERNEL = 3
    STRIDE = 2

    def __init__(self, n_mels: int, embedding_dim: int, rng: np.random.Generator | None = None):
        self.n_mels = n_mels
        self.embedding_dim = embedding_dim
        w1 = (n_mels - self.KERNEL) // self.STRIDE + 1
        w2 = (w1 - self.KERNEL) // self.STRIDE + 1
        if w2 < 1:
            raise ShapeMismatch(f"n_mels {n_mels} too small for the conv stack")
        self.flat_dim = self.CONV2_CH * w2

        self.conv1 = Conv2d(1, self.CONV1_CH, self.KERNEL, self.STRIDE)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(self.CONV1_CH, self.CONV2_CH, self.KERNEL, self.STRIDE)
        self.relu2 = ReLU()
        self.lin1 = Linear(self.flat_dim, embedding_dim)
        self.pool = TemporalMeanPool()
        self.lin2 = Linear(embedding_dim, embedding_dim)
        self._flat_shape: tuple | None = None

        if rng is not None:
            k = self.KERNEL
            self.conv1.w.value[...] = init_kaiming_normal(self.conv1.w.shape, 1 * k * k, rng)
            self.conv2.w.value[...] = init_kaiming_normal(
                self.conv2.w.shape, self.CONV1_CH * k * k, rng
            )
            self.lin1.w.value[...] = init_kaiming_normal(self.lin1.w.shape, self.flat_dim, rng)
            self.lin2.w.value[...] = init_kaiming_normal(self.lin2.w.shape, embedding_dim, rng)

    def parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for prefix, layer in [
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("lin1", self.lin1),
            ("lin2", self.lin2),
        ]:
            for name, p in layer.parameters():
                out.append((f"{prefix}.{name}", p))
        return out

    def forward(self, feats: np.ndarray) -> np.ndarray:
        """(N, T, n_mels) log-MFBE frames -> (N, embedding_dim)."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[2] != self.n_mels:
            raise ShapeMismatch(f"encoder: expected (N, T, {self.n_mels}), got {feats.shape}")
        min_t = self.STRIDE * self.KERNEL + 1  # two stride-2 valid convs
        if feats.shape[1] < min_t:
            raise InputTooShort(
                f"encoder needs at least {min_t} frames, got {feats.shape[1]}"
            )
        x = self.conv1.forward(feats[:, None, :, :])
        x = self.relu1.forward(x)
        x = self.conv2.forward(x)
        x = self.relu2.forward(x)
        self._flat_shape = x.shape  # (N, C, T2, W2)
        n, c, t2, w2 = x.shape
        x = np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(n, t2, c * w2)
        x = self.lin1.forward(x)
        x = self.pool.forward(x)
        return self.lin2.forward(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Propagate (N, embedding_dim) grads back to the input features."""
        if self._flat_shape is None:
            raise BackwardBeforeForward("encoder: backward called without a forward")
        n, c, t2, w2 = self._flat_shape
        self._flat_shape = None
        g = self.lin2.backward(grad_out)
        g = self.pool.backward(g)
        g = self.lin1.backward(g)
        g = g.reshape(n, t2, c, w2).transpose(0, 2, 1, 3)
        g = self.relu2.backward(np.ascontiguousarray(g))
        g = self.conv2.backward(g)
        g = self.relu1.backward(g)
        g = self.conv1.backward(g)
        return g[:, 0, :, :]


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-5, rng=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Uses the scalar projection loss L = sum(r * layer(x)) with a fixed random
    r, perturbing every input element and every parameter element by +-eps.
    """
    if not 0.0 < eps <= 1e-2:
        raise StreamSVError(f"eps must be in (0, 1e-2], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)

    y = layer.forward(x)
    r = rng.normal(size=y.shape)
    for _, p in layer.parameters():
        p.grad[...] = 0.0
    dx = layer.backward(r)

    def loss_at(xv):
        out = layer.forward(xv)
        layer._cached_input = None  # probe only; do not arm backward
        return float(np.sum(r * out))

    worst = 0.0

    def compare(analytic, numeric):
        nonlocal worst
        denom = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)

    flat_x = x.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        up = loss_at(x)
        flat_x[i] = orig - eps
        down = loss_at(x)
        flat_x[i] = orig
        compare(dx.reshape(-1)[i], (up - down) / (2 * eps))

    for _, p in layer.parameters():
        flat_v = p.value.reshape(-1)
        flat_g = p.grad.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + eps
            up = loss_at(x)
            flat_v[i] = orig - eps
            down = loss_at(x)
            flat_v[i] = orig
            compare(flat_g[i], (up - down) / (2 * eps))
    return worst
