"""Affine coupling layers, their masks and conditioner networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowood.bijections import Bijection
from flowood.module import Module, param
from flowood.tensor import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    exp,
    no_grad,
    relu,
    reshape,
    take,
    tanh,
)

MASK_SCHEMES = ("channel_wise", "checkerboard", "cycle")
SCALE_MAX = 2.0


@dataclass(frozen=True)
class MaskSpec:
    scheme: str = "channel_wise"
    cycle_iterations: int = 1
    layer_index: int = 0

    def __post_init__(self):
        if self.scheme not in MASK_SCHEMES:
            raise ValueError(f"unknown mask scheme {self.scheme!r}")
        if self.cycle_iterations < 0:
            raise ValueError("cycle_iterations must be >= 0")


@dataclass(frozen=True)
class Partition:
    """Two-set split of a sample's dimensions.

    ``axis == "channel"``: ``a`` and ``b`` are channel indices.
    ``axis == "spatial"``: ``a`` and ``b`` are ``(row, col)`` pixel positions,
    each pixel carrying all of its channels.
    """

    axis: str
    a: tuple
    b: tuple
    extent: tuple

    def mask_a(self) -> np.ndarray:
        m = np.zeros(self.extent)
        for idx in self.a:
            m[idx] = 1.0
        return m


def cycle_shift(channels: int, cycle_iterations: int) -> int:
    return max(1, channels // (2 * (cycle_iterations + 1)))


def make_mask(scheme: str, layer_index: int, shape, cycle_iterations: int = 1,
              strict: bool = True) -> Partition:
    """Partition the per-sample ``shape`` (``(C,)`` or ``(C, H, W)``) for one coupling layer.

    ``strict=False`` lets ``channel_wise`` split an odd channel count into
    floor/ceil halves.
    """
    shape = tuple(shape)
    c = shape[0]
    if scheme == "checkerboard":
        if len(shape) != 3:
            raise ValueError("checkerboard masking needs a spatial (C, H, W) shape")
        h, w = shape[1:]
        pixels = [(i, j) for i in range(h) for j in range(w)]
        a = tuple(p for p in pixels if (p[0] + p[1] + layer_index) % 2 == 0)
        b = tuple(p for p in pixels if (p[0] + p[1] + layer_index) % 2 == 1)
        part = Partition("spatial", a, b, (h, w))
    elif scheme in ("channel_wise", "cycle"):
        if c % 2 and (strict or scheme == "cycle"):
            raise ValueError(f"{scheme} masking needs an even channel count, got {c}")
        half = c // 2
        if scheme == "channel_wise":
            first, second = tuple(range(half)), tuple(range(half, c))
            a, b = (first, second) if layer_index % 2 == 0 else (second, first)
        else:
            start = (layer_index * cycle_shift(c, cycle_iterations)) % c
            a = tuple(sorted((start + j) % c for j in range(half)))
            b = tuple(i for i in range(c) if i not in a)
        part = Partition("channel", a, b, (c,))
    else:
        raise ValueError(f"unknown mask scheme {scheme!r}")
    if not part.a or not part.b:
        raise ValueError("mask produced an empty partition")
    return part


class Conditioner(Module):
    """conv3x3 -> ReLU -> conv3x3 producing stacked (log-scale, shift) maps.

    The output layer starts at zero so a fresh coupling is the identity.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden_channels: int, rng=None,
                 kernel_size: int = 3):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        fan_in = in_channels * k * k
        self.w1 = param(rng.normal(0.0, np.sqrt(1.0 / fan_in), (hidden_channels, in_channels, k, k)))
        self.b1 = param(np.zeros(hidden_channels))
        self.w2 = param(np.zeros((out_channels, hidden_channels, k, k)))
        self.b2 = param(np.zeros(out_channels))
        self.padding = k // 2

    def __call__(self, x) -> Tensor:
        h = relu(conv2d(x, self.w1, self.padding) + reshape(self.b1, (1, -1, 1, 1)))
        return conv2d(h, self.w2, self.padding) + reshape(self.b2, (1, -1, 1, 1))


class AffineCoupling(Bijection):
    """``y_A = x_A * exp(s) + t``, ``y_B = x_B`` with ``(s, t)`` computed from ``x_B``.

    Raw log-scales pass through ``tanh(.) * SCALE_MAX``. An optional context
    tensor is channel-concatenated to the conditioner input.
    """

    kind = "affine_coupling"

    def __init__(self, partition: Partition, channels: int, hidden_channels: int,
                 context_channels: int = 0, rng=None, s_max: float = SCALE_MAX):
        super().__init__()
        if not partition.a or not partition.b:
            raise ValueError("coupling partitions must be non-empty")
        self.partition = partition
        self.s_max = s_max
        if partition.axis == "channel":
            n_in, n_out = len(partition.b), len(partition.a)
            order = np.array(partition.a + partition.b)
            self._restore = np.argsort(order)
        else:
            n_in, n_out = channels, channels
            self._mask = partition.mask_a()[None, None]
        self.conditioner = Conditioner(n_in + context_channels, 2 * n_out, hidden_channels, rng)
        self._n_out = n_out

    def _scale_shift(self, x_b: Tensor, context) -> tuple[Tensor, Tensor]:
        inp = x_b if context is None else concat([x_b, context], axis=1)
        h = self.conditioner(inp)
        k = self._n_out
        return tanh(h[:, :k]) * self.s_max, h[:, k:]

    def _prepare(self, x, context):
        x = as_tensor(x)
        flat = x.ndim == 2
        if flat:
            x = reshape(x, (*x.shape, 1, 1))
            if context is not None:
                context = reshape(as_tensor(context), (*context.shape, 1, 1))
        elif context is not None:
            context = as_tensor(context)
        return x, context, flat

    def forward(self, x, context=None):
        x, context, flat = self._prepare(x, context)
        n = x.shape[0]
        part = self.partition
        if part.axis == "channel":
            x_a, x_b = take(x, part.a, 1), take(x, part.b, 1)
            s, t = self._scale_shift(x_b, context)
            y = take(concat([x_a * exp(s) + t, x_b], axis=1), self._restore, 1)
        else:
            m = self._mask
            s, t = self._scale_shift(x * (1.0 - m), context)
            s, t = s * m, t * m
            y = x * exp(s) + t
        logdet = s.sum(axis=(1, 2, 3))
        if flat:
            y = reshape(y, (n, y.shape[1]))
        return y, logdet

    def inverse(self, y, context=None):
        with no_grad():
            return self._inverse(y, context)

    def _inverse(self, y, context):
        y, context, flat = self._prepare(y, context)
        part = self.partition
        if part.axis == "channel":
            y_a, y_b = take(y, part.a, 1), take(y, part.b, 1)
            s, t = self._scale_shift(y_b, context)
            x_a = (y_a.data - t.data) * np.exp(-s.data)
            x = np.concatenate([x_a, y_b.data], axis=1)[:, self._restore]
        else:
            m = self._mask
            s, t = self._scale_shift(y * (1.0 - m), context)
            x = (y.data - t.data * m) * np.exp(-s.data * m)
        if flat:
            x = x[:, :, 0, 0]
        return Tensor(x)
