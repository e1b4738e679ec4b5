"""The three-headed set network: cardinality logits, slot states and permutation logits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .nn import Affine, Conv2d, Flatten, MaxPool2d, ReLU, Sequential, ShapeError

MAX_SLOTS = 8


@dataclass
class NetworkOutput:
    """Head outputs. Arrays may carry a leading batch axis.

    alpha: (M+1,) cardinality logits for m = 0..M
    o1:    (M, 5) slot states (x, y, w, h, score logit)
    o2:    (M!,) permutation logits indexed by lexicographic rank
    """

    alpha: np.ndarray
    o1: np.ndarray
    o2: np.ndarray

    @property
    def max_cardinality(self) -> int:
        return self.o1.shape[-2]

    def __getitem__(self, i) -> "NetworkOutput":
        return NetworkOutput(self.alpha[i], self.o1[i], self.o2[i])

    def __len__(self) -> int:
        return self.alpha.shape[0]


def head_sizes(M: int):
    return M + 1, 5 * M, math.factorial(M)


class PermSetNet:
    """Conv body plus one affine layer emitting all three heads.

    The body is ``n_blocks`` x (conv 3x3 / relu / maxpool 2x2), flatten,
    affine to ``hidden`` units and relu.
    """

    META_KEYS = ("M", "in_channels", "height", "width", "conv_channels", "hidden", "n_blocks")

    def __init__(self, M: int = 4, in_channels: int = 3, height: int = 64, width: int = 64,
                 conv_channels: int = 16, hidden: int = 256, n_blocks: int = 2, seed: int = 0) -> None:
        if not 1 <= M <= MAX_SLOTS:
            raise ValueError(f"M must be in 1..{MAX_SLOTS}, got {M}")
        scale = 2 ** n_blocks
        if height % scale or width % scale:
            raise ValueError(f"height and width must be divisible by {scale}")
        self.M = M
        self.in_channels = in_channels
        self.height = height
        self.width = width
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.n_blocks = n_blocks
        rng = np.random.default_rng(seed)
        layers = []
        c = in_channels
        for block in range(n_blocks):
            layers += [Conv2d(c, conv_channels, 3, rng=rng, input_grad=block > 0), ReLU(), MaxPool2d()]
            c = conv_channels
        flat = conv_channels * (height // scale) * (width // scale) if n_blocks else in_channels * height * width
        layers += [Flatten(), Affine(flat, hidden, rng=rng), ReLU(), Affine(hidden, sum(head_sizes(M)), rng=rng)]
        self.net = Sequential(layers)

    def forward(self, x: np.ndarray) -> NetworkOutput:
        expected = (self.in_channels, self.height, self.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"network input must be (B, {', '.join(map(str, expected))}), got {x.shape}")
        return self.split_heads(self.net.forward(x))

    __call__ = forward

    def split_heads(self, z: np.ndarray) -> NetworkOutput:
        """View the raw (B, (M+1) + 5M + M!) output as the three heads."""
        na, n1, _ = head_sizes(self.M)
        return NetworkOutput(z[:, :na], z[:, na:na + n1].reshape(-1, self.M, 5), z[:, na + n1:])

    @staticmethod
    def join_heads(grads: NetworkOutput) -> np.ndarray:
        return np.concatenate([grads.alpha, grads.o1.reshape(grads.o1.shape[0], -1), grads.o2], axis=1)

    def backward(self, d_alpha: np.ndarray, d_o1: np.ndarray, d_o2: np.ndarray) -> None:
        # the first conv skips its input gradient, so nothing useful comes back
        self.net.backward(self.join_heads(NetworkOutput(d_alpha, d_o1, d_o2)))

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.net.parameters()

    def gradients(self) -> Dict[str, np.ndarray]:
        return self.net.gradients()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"meta.{k}": np.array([float(getattr(self, k))]) for k in self.META_KEYS}
        out.update({f"net.{k}": v for k, v in self.parameters().items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "PermSetNet":
        try:
            meta = {k: int(tensors[f"meta.{k}"][0]) for k in cls.META_KEYS}
        except KeyError as exc:
            raise ValueError(f"checkpoint lacks network metadata {exc}") from None
        model = cls(**meta)
        params = model.parameters()
        for name, p in params.items():
            stored = tensors.get(f"net.{name}")
            if stored is None or stored.shape != p.shape:
                raise ValueError(f"checkpoint tensor net.{name} missing or mis-shaped")
            p[...] = stored
        return model
