"""Wavelet Flow: a base flow over the 1x1 low-pass plus one conditional flow per Haar level.

Level ``i`` (``0 <= i < n``) models the detail stack ``D_i`` given the
low-pass ``I_i``; level ``n`` is the base flow over ``I_0``. Levels share no
parameters, so each can be trained, saved and scored on its own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from flowood.bijections import ActNorm, Chain, InvConv1x1, layer_scope
from flowood.distributions import gaussian_log_prob, LEVELS
from flowood.glow import flow_step
from flowood.haar import HaarPyramid, build_pyramid, haar_synthesize, num_levels
from flowood.module import Module
from flowood.tensor import Tensor, as_tensor, no_grad

# per-level training iterations of the full-scale 64x64 run, level 0 (base) to 6
FULL_SCALE_LEVEL_ITERATIONS = (1630000, 1130000, 400000, 530000, 510000, 940000, 840000)


@dataclass
class WaveletFlowConfig:
    image_size: int = 32
    channels: int = 3
    flows_per_level: int = 4
    hidden_channels: int = 64
    identity_conv: bool = False
    seed: int = 0
    level_iterations: list = field(default_factory=list)

    def __post_init__(self):
        num_levels(self.image_size)
        if self.channels < 1 or self.flows_per_level < 1:
            raise ValueError("channels and flows_per_level must be >= 1")

    @property
    def n_levels(self) -> int:
        return num_levels(self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)


def level_flow(channels: int, extent: int, depth: int, hidden: int, context_channels: int,
               rng, identity_conv: bool = False) -> Chain:
    if channels < 2:
        steps = [Chain([ActNorm(channels), InvConv1x1(channels, rng=rng, identity=identity_conv)])
                 for _ in range(depth)]
    else:
        steps = [
            flow_step(channels, (extent, extent), k, hidden, "channel_wise", 0, rng,
                      identity_conv, context_channels=context_channels, strict_mask=False)
            for k in range(depth)
        ]
    return Chain(steps)


class WaveletFlowModel(Module):
    def __init__(self, config: WaveletFlowConfig):
        super().__init__()
        self.config = config
        n, c = config.n_levels, config.channels
        self.level_flows = [
            level_flow(3 * c, 2**i, config.flows_per_level, config.hidden_channels, c,
                       np.random.default_rng([config.seed, i]), config.identity_conv)
            for i in range(n)
        ]
        self.base_flow = level_flow(c, 1, config.flows_per_level, config.hidden_channels, 0,
                                    np.random.default_rng([config.seed, n]), config.identity_conv)

    @property
    def n_levels(self) -> int:
        return self.config.n_levels

    @property
    def num_dims(self) -> int:
        return self.config.channels * self.config.image_size**2

    def flow(self, level: int) -> Chain:
        self._check_level(level)
        return self.base_flow if level == self.n_levels else self.level_flows[level]

    def section_prefix(self, level: int) -> str:
        self._check_level(level)
        return "base_flow." if level == self.n_levels else f"level_flows.{level}."

    def _check_level(self, level: int) -> None:
        if not 0 <= level <= self.n_levels:
            raise ValueError(f"level {level} out of range 0..{self.n_levels}")

    def coefficient_count(self, level: int) -> int:
        self._check_level(level)
        c = self.config.channels
        return c if level == self.n_levels else 3 * c * 4**level

    def _context(self, low: np.ndarray, level: int) -> np.ndarray:
        # rescale the low-pass to pixel range
        return low * 2.0 ** (level - self.n_levels)

    def level_inputs(self, pyramid: HaarPyramid, level: int):
        """``(data, context)`` arrays fed to the flow of ``level``."""
        self._check_level(level)
        if level == self.n_levels:
            return pyramid.lows[0], None
        return pyramid.details[level], self._context(pyramid.lows[level], level)

    def level_log_likelihood(self, level: int, data, context=None) -> Tensor:
        """``log p(D_level | I_level)`` (or ``log p0(I_0)``) in nats, no dequantization term."""
        with layer_scope(f"level{level}."):
            z, logdet = self.flow(level).forward(as_tensor(data), context)
        return gaussian_log_prob(z) + logdet

    def level_correction(self, level: int) -> float:
        # the orthonormal Haar step preserves volume, so the pixel-level
        # dequantization offset splits evenly over coefficients
        return -self.coefficient_count(level) * math.log(LEVELS)

    def _pyramid(self, x) -> HaarPyramid:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if x.shape[1:] != expected:
            raise ValueError(f"expected images of shape {expected}, got {x.shape[1:]}")
        return build_pyramid(x)

    def level_terms(self, x) -> list[Tensor]:
        """Per-level log-likelihoods ``[level 0, ..., level n - 1, base]``."""
        pyr = self._pyramid(x)
        return [
            self.level_log_likelihood(level, *self.level_inputs(pyr, level))
            + self.level_correction(level)
            for level in range(self.n_levels + 1)
        ]

    def per_level_log_likelihood(self, x, level: int) -> Tensor:
        pyr = self._pyramid(x)
        return (self.level_log_likelihood(level, *self.level_inputs(pyr, level))
                + self.level_correction(level))

    def per_level_bpd(self, x, level: int) -> np.ndarray:
        ll = self.per_level_log_likelihood(x, level).data
        return -ll / (self.coefficient_count(level) * math.log(2.0))

    def total_log_likelihood(self, x) -> Tensor:
        terms = self.level_terms(x)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def log_likelihood(self, x) -> Tensor:
        return self.total_log_likelihood(x)

    def nll_loss(self, x) -> Tensor:
        return -self.log_likelihood(x).mean()

    def encode(self, x) -> list[np.ndarray]:
        """Latents ordered ``[level 0, ..., level n - 1, base]``."""
        pyr = self._pyramid(x)
        with no_grad():
            return [self.flow(level).forward(*self.level_inputs(pyr, level))[0].data
                    for level in range(self.n_levels + 1)]

    def decode(self, latents) -> np.ndarray:
        n = self.n_levels
        with no_grad():
            low = self.base_flow.inverse(as_tensor(latents[n])).data
            for level in range(n):
                ctx = Tensor(self._context(low, level))
                detail = self.level_flows[level].inverse(as_tensor(latents[level]), ctx).data
                low = haar_synthesize(low, detail)
        return low

    def latent_shapes(self) -> list[tuple]:
        c = self.config.channels
        return [(3 * c, 2**i, 2**i) for i in range(self.n_levels)] + [(c, 1, 1)]

    def sample(self, n: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        rng = np.random.default_rng(seed)
        shapes = self.latent_shapes()
        # base latent first, then detail levels coarse to fine
        order = [len(shapes) - 1] + list(range(len(shapes) - 1))
        latents: list = [None] * len(shapes)
        for i in order:
            latents[i] = temperature * rng.standard_normal((n, *shapes[i]))
        return np.clip(self.decode(latents) + 0.5, 0.0, 1.0)
