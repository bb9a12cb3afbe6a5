"""Multi-scale GLOW: squeeze -> K x (actnorm, 1x1 conv, coupling) -> split, repeated."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from flowood.bijections import ActNorm, Chain, InvConv1x1, layer_scope, merge, split, squeeze, unsqueeze
from flowood.coupling import AffineCoupling, make_mask
from flowood.distributions import dequantization_correction, gaussian_log_prob
from flowood.module import Module
from flowood.tensor import Tensor, as_tensor, no_grad


@dataclass
class GlowConfig:
    image_shape: tuple = (3, 64, 64)
    levels: int = 3
    flows_per_level: int = 32
    hidden_channels: int = 256
    mask_scheme: str = "channel_wise"
    cycle_iterations: int = 1
    identity_conv: bool = False
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        c, h, w = self.image_shape
        if self.levels < 1 or self.flows_per_level < 1:
            raise ValueError("levels and flows_per_level must be >= 1")
        step = 2**self.levels
        if h % step or w % step:
            raise ValueError(f"image extents {h}x{w} must be divisible by 2^levels = {step}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def flow_step(channels: int, spatial: tuple, layer_index: int, hidden: int, scheme: str,
              cycle_iterations: int, rng, identity_conv: bool = False,
              context_channels: int = 0, strict_mask: bool = True) -> Chain:
    """One actnorm -> invertible 1x1 conv -> affine coupling step."""
    part = make_mask(scheme, layer_index, (channels, *spatial), cycle_iterations, strict=strict_mask)
    return Chain([
        ActNorm(channels),
        InvConv1x1(channels, rng=rng, identity=identity_conv),
        AffineCoupling(part, channels, hidden, context_channels=context_channels, rng=rng),
    ])


class GlowModel(Module):
    def __init__(self, config: GlowConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, h, w = config.image_shape
        self.levels = []
        self._latent_shapes = []
        for level in range(config.levels):
            c, h, w = 4 * c, h // 2, w // 2
            steps = [
                flow_step(c, (h, w), k, config.hidden_channels, config.mask_scheme,
                          config.cycle_iterations, rng, config.identity_conv)
                for k in range(config.flows_per_level)
            ]
            self.levels.append(Chain(steps))
            if level < config.levels - 1:
                c //= 2
                self._latent_shapes.append((c, h, w))
        self._latent_shapes.append((c, h, w))

    @property
    def num_dims(self) -> int:
        return int(np.prod(self.config.image_shape))

    @property
    def latent_shapes(self) -> list[tuple]:
        return list(self._latent_shapes)

    def encode(self, x):
        """Map data to latents.

        Returns ``(latents, prior_logp, logdet, trace)``; ``trace`` lists
        ``(name, logdet)`` for every bijection in application order.
        """
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.config.image_shape:
            raise ValueError(f"expected images of shape {self.config.image_shape}, got {x.shape[1:]}")
        latents, trace = [], []
        prior = None
        logdet = None
        for li, chain in enumerate(self.levels):
            x = squeeze(x)
            with layer_scope(f"level{li}."):
                x, ld, steps = chain.forward_trace(x)
            trace.extend((f"level{li}.{name}", v) for name, v in steps)
            logdet = ld if logdet is None else logdet + ld
            if li < len(self.levels) - 1:
                x, z = split(x)
            else:
                z = x
            latents.append(z)
            lp = gaussian_log_prob(z)
            prior = lp if prior is None else prior + lp
        return latents, prior, logdet, trace

    def log_likelihood(self, x) -> Tensor:
        """Per-sample log-likelihood in nats of dequantized images (pixel-level)."""
        _, prior, logdet, _ = self.encode(x)
        return prior + logdet + dequantization_correction(self.num_dims)

    def nll_loss(self, x) -> Tensor:
        return -self.log_likelihood(x).mean()

    def decode(self, latents) -> Tensor:
        with no_grad():
            x = None
            for li in reversed(range(len(self.levels))):
                z = as_tensor(latents[li])
                x = z if x is None else merge(x, z)
                x = self.levels[li].inverse(x)
                x = unsqueeze(x)
        return x

    def sample_latents(self, n: int, temperature: float, rng) -> list[np.ndarray]:
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        return [temperature * rng.standard_normal((n, *s)) for s in self._latent_shapes]

    def sample(self, n: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        """Draw ``n`` images with pixel values in [0, 1]."""
        rng = np.random.default_rng(seed)
        x = self.decode(self.sample_latents(n, temperature, rng)).data
        return np.clip(x + 0.5, 0.0, 1.0)

