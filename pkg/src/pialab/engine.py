"""Minimal deterministic CPU forward/backward engine.

Layers, losses and optimizers are exactly the ones the nine reference
CNN architectures need: valid stride-1 convolution, 2x2 max-pooling,
fully-connected layers, relu/sigmoid/tanh, MSE/L1 losses, SGD/Adam.

Image tensors are numpy arrays in (batch, channel, height, width)
row-major layout. Training runs in float32 by default; gradient tests
build float64 models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, UsageError


@dataclass
class Parameter:
    """One trainable tensor plus its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray
    layer_id: int = -1
    kind: str = "kernel"  # "kernel" | "bias"

    @classmethod
    def create(cls, value: np.ndarray, kind: str = "kernel") -> "Parameter":
        return cls(value=value, grad=np.zeros_like(value), kind=kind)


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in), the default of common frameworks."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: forward caches whatever backward needs."""

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Valid (no padding) stride-1 convolution."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = Parameter.create(
            init_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                         fan_in, dtype), kind="kernel")
        self.bias = Parameter.create(
            init_uniform(rng, (out_channels,), fan_in, dtype), kind="bias")
        self._cols = None
        self._shapes = None

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ConfigurationError(f"conv2d expects a 4-d batch, got shape {x.shape}")
        b, c, h, w = x.shape
        k = self.kernel_size
        if c != self.in_channels:
            raise ConfigurationError(
                f"conv2d channel mismatch: input shape {x.shape} vs kernel shape "
                f"{self.kernel.value.shape}")
        if h < k or w < k:
            raise ConfigurationError(
                f"conv2d input {h}x{w} smaller than kernel {k}x{k}")
        oh, ow = h - k + 1, w - k + 1
        # im2col in channel-major layout: k*k cheap slice copies, then one
        # batched gemm. cols is (B, C*k*k, OH*OW) viewed as 6-d for filling.
        cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
        cols = cols.reshape(b, c * k * k, oh * ow)
        self._cols = cols
        self._shapes = (b, c, h, w, oh, ow)
        wmat = self.kernel.value.reshape(self.out_channels, -1)
        out = np.matmul(wmat[None, :, :], cols)
        out += self.bias.value[None, :, None]
        return out.reshape(b, self.out_channels, oh, ow)

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        if self._cols is None:
            raise UsageError("conv2d backward called before forward")
        b, c, h, w, oh, ow = self._shapes
        k = self.kernel_size
        gmat = grad.reshape(b, self.out_channels, oh * ow)
        dw = np.matmul(gmat, self._cols.transpose(0, 2, 1)).sum(axis=0)
        self.kernel.grad += dw.reshape(self.kernel.value.shape)
        self.bias.grad += grad.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None
        wmat = self.kernel.value.reshape(self.out_channels, -1)
        dcols = np.matmul(wmat.T[None, :, :], gmat)
        dwin = dcols.reshape(b, c, k, k, oh, ow)
        dx = np.zeros((b, c, h, w), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + oh, j:j + ow] += dwin[:, :, i, j]
        return dx


class MaxPool2x2(Layer):
    """Disjoint 2x2 max-pooling, stride 2.

    Odd trailing rows/columns are dropped (floor semantics), matching the
    shape arithmetic of the reference architectures on 64x64 inputs.
    Ties route the gradient to the first position in row-major window
    order.
    """

    def __init__(self):
        self._in_shape = None
        self._argmax = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        if oh == 0 or ow == 0:
            raise ConfigurationError(f"maxpool2x2 input {h}x{w} too small to pool")
        self._in_shape = x.shape
        cropped = x[:, :, : oh * 2, : ow * 2]
        win = cropped.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = win.reshape(b, c, oh, ow, 4)
        self._argmax = np.argmax(flat, axis=-1)  # first max wins
        return np.take_along_axis(flat, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        b, c, h, w = self._in_shape
        oh, ow = h // 2, w // 2
        flat = np.zeros((b, c, oh, ow, 4), dtype=grad.dtype)
        np.put_along_axis(flat, self._argmax[..., None], grad[..., None], axis=-1)
        win = flat.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        out = np.zeros(self._in_shape, dtype=grad.dtype)
        out[:, :, : oh * 2, : ow * 2] = win.reshape(b, c, oh * 2, ow * 2)
        return out


class Flatten(Layer):
    """(B, C, H, W) -> (B, C*H*W) row-major."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._in_shape)


class FullyConnected(Layer):
    """Affine map: out = x @ W.T + b with W of shape (out, in)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter.create(
            init_uniform(rng, (out_features, in_features), in_features, dtype),
            kind="kernel")
        self.bias = Parameter.create(
            init_uniform(rng, (out_features,), in_features, dtype), kind="bias")
        self._input = None

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ConfigurationError(
                f"fully_connected expects (B, {self.in_features}), got {x.shape}")
        self._input = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.weight.grad += grad.T @ self._input
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


ACTIVATIONS = ("relu", "sigmoid", "tanh")


class Activation(Layer):
    """Elementwise nonlinearity. relu'(0) is defined as 0."""

    def __init__(self, kind: str):
        if kind not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            out = np.maximum(x, 0)
            self._cache = x > 0
        elif self.kind == "sigmoid":
            out = 1.0 / (1.0 + np.exp(-x))
            self._cache = out
        else:
            out = np.tanh(x)
            self._cache = out
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return grad * self._cache
        if self.kind == "sigmoid":
            s = self._cache
            return grad * s * (1.0 - s)
        t = self._cache
        return grad * (1.0 - t * t)


class Sequential:
    """Fixed layer list with caching forward and reverse backward."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers
        for i, layer in enumerate(layers):
            for p in layer.parameters():
                p.layer_id = i

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray,
                 need_input_grad: bool = True) -> np.ndarray | None:
        for i, layer in enumerate(reversed(self.layers)):
            is_first = i == len(self.layers) - 1
            if is_first and not need_input_grad and isinstance(layer, Conv2d):
                return layer.backward(grad, need_input_grad=False)
            grad = layer.backward(grad)
        return grad

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0


LOSSES = ("mse", "l1")


def loss(prediction: np.ndarray, target: np.ndarray, kind: str = "mse"):
    """Return (scalar loss, gradient w.r.t. prediction).

    mse = mean((p-t)^2), l1 = mean(|p-t|); the L1 subgradient at 0 is 0.
    """
    if prediction.shape != target.shape:
        raise ConfigurationError(
            f"loss shape mismatch: prediction {prediction.shape} vs target "
            f"{target.shape}")
    diff = prediction - target
    n = diff.size
    if kind == "mse":
        return float(np.mean(diff * diff)), (2.0 / n) * diff
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    raise ConfigurationError(f"unknown loss kind {kind!r}")


class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, params: list[Parameter], learning_rate: float):
        if learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self) -> None:
        for p in self.params:
            p.value -= self.learning_rate * p.grad
        self.step_count += 1


class Adam:
    """Bias-corrected Adam without weight decay."""

    def __init__(self, params: list[Parameter], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in params]
        self._v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        lr = self.learning_rate
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.value -= lr * mhat / (np.sqrt(vhat) + self.epsilon)


OPTIMIZERS = ("sgd", "adam")


def make_optimizer(kind: str, params: list[Parameter], learning_rate: float):
    if kind == "sgd":
        return SGD(params, learning_rate)
    if kind == "adam":
        return Adam(params, learning_rate)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def finite_difference_check(model: Sequential, x: np.ndarray, target: np.ndarray,
                            loss_kind: str = "mse", h: float = 1e-5,
                            samples_per_tensor: int = 0,
                            rng: np.random.Generator | None = None,
                            check_input: bool = True) -> dict:
    """Compare analytic gradients against central finite differences.

    Runs in whatever dtype the model uses; callers wanting tight
    tolerances must build float64 models. With samples_per_tensor > 0 a
    seeded random subset of coordinates per tensor is checked, otherwise
    every coordinate. Inputs must sit away from relu kinks and pooling
    ties; callers use seeded inputs that satisfy this.

    Returns {"groups": {name: max_rel_err}, "max_rel_err": float}.
    """
    if samples_per_tensor and rng is None:
        raise UsageError("sampled checks need an rng")

    def objective() -> float:
        value, _ = loss(model.forward(x), target, loss_kind)
        if not np.isfinite(value):
            raise NumericError("non-finite loss in finite-difference check")
        return value

    # Analytic pass.
    model.zero_grad()
    out = model.forward(x)
    _, dloss = loss(out, target, loss_kind)
    dx = model.backward(dloss)

    groups: dict[str, float] = {}

    def check_tensor(name: str, values: np.ndarray, analytic: np.ndarray) -> None:
        flat_v = values.reshape(-1)
        flat_a = analytic.reshape(-1)
        if samples_per_tensor and samples_per_tensor < flat_v.size:
            idx = rng.choice(flat_v.size, size=samples_per_tensor, replace=False)
        else:
            idx = np.arange(flat_v.size)
        worst = 0.0
        for i in idx:
            orig = flat_v[i]
            flat_v[i] = orig + h
            plus = objective()
            flat_v[i] = orig - h
            minus = objective()
            flat_v[i] = orig
            numeric = (plus - minus) / (2 * h)
            if not np.isfinite(numeric):
                raise NumericError(f"non-finite finite difference at {name}[{i}]")
            a = flat_a[i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
        groups[name] = worst

    for j, p in enumerate(model.parameters()):
        check_tensor(f"layer{p.layer_id}.{p.kind}.{j}", p.value, p.grad)
    if check_input:
        check_tensor("input", x, dx)
    return {"groups": groups, "max_rel_err": max(groups.values())}
