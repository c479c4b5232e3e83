"""Small convolutional encoder, task classifier head and domain discriminator.

The conv stack keeps the spatial layout: an ``R x R x 2`` flow frame becomes
an ``(R/4) x (R/4)`` grid of ``D``-dimensional vectors, each tied to one
4x4 pixel patch.  These are the location features the attention decoder
weighs.  Averaging them gives the per-sample embedding used by the class
head, the discriminator and the manifold regulariser.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CONV_WIDTHS = (16, 16, 32)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Named-parameter container; subclasses fill ``self.params``."""

    params: dict[str, Tensor]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int):
        self.params = {"weight": glorot(rng, (n_in, n_out), n_in, n_out), "bias": zeros((n_out,))}

    def __call__(self, x: Tensor) -> Tensor:
        return nc.matmul(x, self.params["weight"]) + self.params["bias"]


class ConvEncoder(Module):
    """conv(2->16) relu, conv(16->16) relu, pool, conv(16->32) relu, pool."""

    def __init__(self, rng, in_channels: int = 2, widths=CONV_WIDTHS):
        c1, c2, c3 = widths
        self.params = {}
        for name, (i, o) in zip(("conv1", "conv2", "conv3"), ((in_channels, c1), (c1, c2), (c2, c3))):
            self.params[f"{name}.weight"] = glorot(rng, (o, i, 3, 3), i * 9, o * 9)
            self.params[f"{name}.bias"] = zeros((o,))
        self.in_channels = in_channels
        self.dim = c3

    def feature_map(self, x: Tensor) -> Tensor:
        """``(N, R, R, C)`` -> ``(N, R/4, R/4, D)``."""
        if x.ndim != 4 or x.shape[3] != self.in_channels or x.shape[1] % 4 or x.shape[2] % 4:
            raise nc.ShapeError(f"encoder: expected (N, R, R, {self.in_channels}) with R divisible by 4, got {x.shape}")
        p = self.params
        h = nc.relu(nc.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
        h = nc.relu(nc.conv2d(h, p["conv2.weight"], p["conv2.bias"]))
        h = nc.maxpool2x2(h)
        h = nc.relu(nc.conv2d(h, p["conv3.weight"], p["conv3.bias"]))
        return nc.maxpool2x2(h)

    def __call__(self, x: Tensor) -> Tensor:
        """Location features ``(N, L, D)``, locations in row-major grid order."""
        fm = self.feature_map(x)
        n, gh, gw, d = fm.shape
        return nc.reshape(fm, (n, gh * gw, d))


def encode_frame(encoder: ConvEncoder, frame) -> np.ndarray:
    """FeatureGrid ``(L, D)`` of a single ``(R, R, 2)`` frame."""
    with nc.no_grad():
        x = Tensor(np.asarray(frame)[None])
        return encoder(x).data[0]


def embed(grid: Tensor, axis=1) -> Tensor:
    """Global average over the location axis (and any extra axes given)."""
    return nc.mean(grid, axis=axis)


class Classifier(Linear):
    """Linear ``D -> K`` followed by softmax."""

    def __call__(self, v: Tensor) -> Tensor:
        return nc.softmax(super().__call__(v), axis=-1)


class Discriminator(Module):
    """MLP ``D -> 32 (relu) -> 2``; column 0 = source, 1 = target."""

    def __init__(self, rng, dim: int, hidden: int = 32):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, 2)
        self.params = {**self.fc1.named_parameters("fc1."), **self.fc2.named_parameters("fc2.")}

    def __call__(self, v: Tensor) -> Tensor:
        return nc.softmax(self.fc2(nc.relu(self.fc1(v))), axis=-1)
