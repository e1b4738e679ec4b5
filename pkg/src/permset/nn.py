"""Dense float64 layers with hand-written backward passes, plus Adam.

Arrays are plain ``numpy.ndarray`` objects of dtype float64. Every layer works on
a leading batch axis: affine layers take ``(B, features)``, image layers take
``(B, C, H, W)``.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NotForwardedError(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Layer:
    """Base class. Subclasses fill ``params`` and, after backward, ``grads``."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise NotForwardedError(f"{self.kind}: backward called before forward")
        return self._cache

    def __repr__(self) -> str:
        return self.kind


class Affine(Layer):
    kind = "affine"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        self.params["bias"] = np.zeros(out_features, dtype=DTYPE)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"affine expects (B, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        x = self._cached()
        self.grads["weight"] = grad.T @ x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]

    def __repr__(self):
        return f"affine({self.in_features}->{self.out_features})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._cached(), grad, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        out = sigmoid(x)
        self._cache = out
        return out

    def backward(self, grad):
        out = self._cached()
        return grad * out * (1.0 - out)


class Softmax(Layer):
    """Row-wise softmax over the last axis."""

    kind = "softmax"

    def forward(self, x):
        out = softmax(x)
        self._cache = out
        return out

    def backward(self, grad):
        out = self._cached()
        return out * (grad - np.sum(grad * out, axis=-1, keepdims=True))


class Conv2d(Layer):
    """Stride-1 convolution with zero "same" padding (odd kernel sizes)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 rng: Optional[np.random.Generator] = None, input_grad: bool = True) -> None:
        super().__init__()
        # the first layer of a network never needs d(loss)/d(input); skipping it halves its backward cost
        self.input_grad = input_grad
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.params["weight"] = glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out)
        self.params["bias"] = np.zeros(out_channels, dtype=DTYPE)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv2d expects (B, {self.in_channels}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        k, p = self.kernel, self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (B, C, H, W, k, k) -> (B, C*k*k, H*W); the batched product then lands in NCHW order
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = cols.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, h * w)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = np.matmul(wmat, cols)
        out += self.params["bias"][:, None]
        self._cache = (cols, x.shape)
        return out.reshape(b, self.out_channels, h, w)

    def backward(self, grad):
        cols, (b, c, h, w) = self._cached()
        k, p = self.kernel, self.kernel // 2
        g = np.ascontiguousarray(grad).reshape(b, self.out_channels, h * w)
        self.grads["weight"] = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.params["weight"].shape)
        self.grads["bias"] = g.sum(axis=(0, 2))
        if not self.input_grad:
            return None
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        dcols = np.matmul(wmat.T, g).reshape(b, c, k, k, h, w)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
        return dxp[:, :, p:p + h, p:p + w]

    def __repr__(self):
        return f"conv2d({self.in_channels}->{self.out_channels},{self.kernel}x{self.kernel})"


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling; H and W must be even."""

    kind = "maxpool2d"

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"maxpool2d expects (B, C, H, W) with even H, W, got {x.shape}")
        a, b, c, d = x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]
        top, bottom = np.maximum(a, b), np.maximum(c, d)
        # index of the first maximum in (a, b, c, d) order, like argmax
        idx = np.where(bottom > top, np.where(d > c, 3, 2), np.where(b > a, 1, 0)).astype(np.int8)
        self._cache = (idx, x.shape)
        return np.maximum(top, bottom)

    def backward(self, grad):
        idx, shape = self._cached()
        dx = np.zeros(shape, dtype=DTYPE)
        for n, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, :, i::2, j::2] = np.where(idx == n, grad, 0.0)
        return dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Sequential:
    """An ordered list of layers with parameters named ``"<index>.<name>"``."""

    def __init__(self, layers: Iterable[Layer]) -> None:
        self.layers: List[Layer] = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}): {exc}") from None
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                if k not in layer.grads:
                    raise NotForwardedError(f"layer {i} ({layer!r}) has no gradient for {k!r}")
                out[f"{i}.{k}"] = layer.grads[k]
        return out

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Adam:
    """Bias-corrected Adam; weight decay enters the gradient as ``2 * weight_decay * param``."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Update ``params`` in place and return them."""
        for name, p in params.items():
            if grads[name].shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {grads[name].shape}, parameter has {p.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name] + 2.0 * self.weight_decay * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["adam.step"][0])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v.")}


LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def gradient_check(network: Sequential, x: np.ndarray, loss_fn: LossFn, h: float = 1e-5,
                   max_per_param: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between backprop and central differences over all parameters.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``. With
    ``max_per_param`` set, only that many randomly chosen entries of each tensor
    are probed.
    """
    params = network.parameters()
    if not params:
        return 0.0
    _, g = loss_fn(network.forward(x))
    network.backward(g)
    analytic = {k: v.copy() for k, v in network.gradients().items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx: Sequence[int] = range(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_fn(network.forward(x))
            flat[i] = old - h
            lm, _ = loss_fn(network.forward(x))
            flat[i] = old
            num = (lp - lm) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(1e-8, abs(a_flat[i]) + abs(num))
            worst = max(worst, err)
    return worst
