"""Invertible transforms with exact log-Jacobian-determinants.

Every bijection maps data towards the latent space in ``forward`` and returns
``(y, logdet)`` with ``logdet`` holding one value per sample. ``inverse`` maps
back and returns only the reconstructed input.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
import scipy.linalg

from flowood.module import Module, param
from flowood.tensor import (
    Tensor,
    as_tensor,
    channel_mean,
    channel_std,
    concat,
    conv2d,
    exp,
    log,
    no_grad,
    reshape,
    softplus,
    sqrt,
    tanh,
    transpose,
)


_hooks = threading.local()


@contextlib.contextmanager
def watch_layers(hook):
    """Call ``hook(name, output, logdet)`` after every leaf step run inside a Chain."""
    prev = getattr(_hooks, "fn", None)
    _hooks.fn = hook
    try:
        yield
    finally:
        _hooks.fn = prev


@contextlib.contextmanager
def layer_scope(prefix: str):
    """Prefix hook names reported by ``watch_layers`` inside this block."""
    prev = getattr(_hooks, "scope", "")
    _hooks.scope = prev + prefix
    try:
        yield
    finally:
        _hooks.scope = prev


class Bijection(Module):
    kind = "bijection"

    def forward(self, x, context=None) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, y, context=None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, context=None):
        return self.forward(x, context)


def _const_logdet(value: Tensor, n: int) -> Tensor:
    return value * np.ones(n)


# -- vector flows --------------------------------------------------------------------


class ElementwiseAffine(Bijection):
    """``h(x) = a * x + b`` applied to every element."""

    kind = "elementwise"

    def __init__(self, scale: float = 1.0, shift: float = 0.0):
        super().__init__()
        if scale == 0:
            raise ValueError("elementwise scale must be nonzero")
        self.log_scale = param(math.log(abs(scale)))
        self.shift = param(shift)
        self.register_buffer("sign", math.copysign(1.0, scale))

    def forward(self, x, context=None):
        x = as_tensor(x)
        a = exp(self.log_scale) * self.buffer("sign")
        dims = x.size // x.shape[0]
        return x * a + self.shift, _const_logdet(self.log_scale * dims, x.shape[0])

    def inverse(self, y, context=None):
        a = np.exp(self.log_scale.data) * self.buffer("sign")
        return Tensor((as_tensor(y).data - self.shift.data) / a)


class LUWeight(Module):
    """Square matrix ``P @ L @ (U + diag(sign * exp(log_s)))`` with fixed ``P`` and signs."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, weight=None,
                 identity: bool = False):
        super().__init__()
        if weight is not None:
            w = np.asarray(weight, dtype=np.float64)
        elif identity:
            w = np.eye(dim)
        else:
            rng = rng or np.random.default_rng(0)
            w = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
        p, lower, upper = scipy.linalg.lu(w)
        diag = np.diag(upper)
        if np.any(diag == 0):
            raise ValueError("weight matrix is singular")
        self.lower = param(np.tril(lower, -1))
        self.upper = param(np.triu(upper, 1))
        self.log_s = param(np.log(np.abs(diag)))
        self.register_buffer("perm", p)
        self.register_buffer("sign", np.sign(diag))
        self._tril = np.tril(np.ones((dim, dim)), -1)
        self._triu = np.triu(np.ones((dim, dim)), 1)
        self._eye = np.eye(dim)

    @property
    def dim(self) -> int:
        return self.log_s.shape[0]

    def weight(self) -> Tensor:
        lower = self.lower * self._tril + self._eye
        upper = self.upper * self._triu + self._eye * (exp(self.log_s) * self.buffer("sign"))
        return Tensor(self.buffer("perm")) @ (lower @ upper)

    def log_abs_det(self) -> Tensor:
        return self.log_s.sum()

    def inverse_weight(self) -> np.ndarray:
        lower = self.lower.data * self._tril + self._eye
        upper = self.upper.data * self._triu + np.diag(np.exp(self.log_s.data) * self.buffer("sign"))
        # W^-1 = U^-1 L^-1 P^T
        linv_pt = scipy.linalg.solve_triangular(lower, self.buffer("perm").T, lower=True,
                                                unit_diagonal=True)
        return scipy.linalg.solve_triangular(upper, linv_pt, lower=False)


class LinearLU(Bijection):
    """``y = A x + b`` with ``A`` held in LU form."""

    kind = "linear_lu"

    def __init__(self, dim: int, rng=None, weight=None, bias=None, identity: bool = False):
        super().__init__()
        self.lu = LUWeight(dim, rng=rng, weight=weight, identity=identity)
        self.bias = param(np.zeros(dim) if bias is None else bias)

    def forward(self, x, context=None):
        x = as_tensor(x)
        y = x @ transpose(self.lu.weight()) + self.bias
        return y, _const_logdet(self.lu.log_abs_det(), x.shape[0])

    def inverse(self, y, context=None):
        winv = self.lu.inverse_weight()
        return Tensor((as_tensor(y).data - self.bias.data) @ winv.T)


_PLANAR_EPS = 1e-4


class Planar(Bijection):
    """``y = x + u_hat * tanh(w.x + b)``.

    ``u_hat`` equals ``u`` whenever ``w.u >= 0``; below that it is pulled
    along ``w`` so that ``w.u_hat > -1``, which keeps the map invertible.
    """

    kind = "planar"

    def __init__(self, dim: int, rng=None, u=None, w=None, b: float = 0.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        u = rng.normal(0.0, 0.1, dim) if u is None else np.asarray(u, dtype=np.float64)
        w = rng.normal(0.0, 0.1, dim) if w is None else np.asarray(w, dtype=np.float64)
        if np.linalg.norm(w) == 0:
            raise ValueError("planar flow needs a nonzero w")
        self.u = param(u)
        self.w = param(w)
        self.b = param(b)

    def u_hat(self) -> Tensor:
        wu = (self.w * self.u).sum()
        a = wu.item()
        if a >= 0:
            return self.u
        # C1 continuation of the identity onto (-1 + eps, 0)
        k = 1.0 - _PLANAR_EPS
        m = (exp(wu / k) * k) + (-1.0 + _PLANAR_EPS)
        return self.u + (m - wu) * self.w / (self.w * self.w).sum()

    def forward(self, x, context=None):
        x = as_tensor(x)
        n, d = x.shape
        u_hat = self.u_hat()
        act = tanh((x @ reshape(self.w, (d, 1))).reshape(n) + self.b)
        y = x + reshape(act, (n, 1)) * u_hat
        wu = (self.w * u_hat).sum()
        logdet = log(1.0 + (1.0 - act * act) * wu)
        return y, logdet

    def inverse(self, y, context=None):
        y = as_tensor(y).data
        with no_grad():
            u_hat = self.u_hat().data
        w, b = self.w.data, float(self.b.data)
        c = float(w @ u_hat)
        target = y @ w
        lo, hi = target - abs(c) - 1.0, target + abs(c) + 1.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            f = mid + c * np.tanh(mid + b) - target
            lo = np.where(f < 0, mid, lo)
            hi = np.where(f < 0, hi, mid)
        alpha = 0.5 * (lo + hi)
        for _ in range(3):
            t = np.tanh(alpha + b)
            alpha = alpha - (alpha + c * t - target) / (1.0 + c * (1.0 - t * t))
        return Tensor(y - np.tanh(alpha + b)[:, None] * u_hat)


def _inv_softplus(v: float) -> float:
    return v + math.log(-math.expm1(-v))


class Radial(Bijection):
    """``y = x + beta / (alpha + r) * (x - x0)`` with ``r = |x - x0|``.

    ``alpha`` is stored as its log and ``beta = -alpha + softplus(raw)`` so the
    map stays invertible under any parameter values.
    """

    kind = "radial"

    def __init__(self, dim: int, rng=None, x0=None, alpha: float = 1.0, beta: float = 0.0):
        super().__init__()
        if alpha <= 0:
            raise ValueError("radial flow needs alpha > 0")
        if beta <= -alpha:
            raise ValueError("radial flow needs beta > -alpha")
        rng = rng or np.random.default_rng(0)
        x0 = rng.normal(0.0, 1.0, dim) if x0 is None else np.asarray(x0, dtype=np.float64)
        self.x0 = param(x0)
        self.log_alpha = param(math.log(alpha))
        self.beta_raw = param(_inv_softplus(beta + alpha))

    def alpha_beta(self) -> tuple[Tensor, Tensor]:
        alpha = exp(self.log_alpha)
        return alpha, softplus(self.beta_raw) - alpha

    def forward(self, x, context=None):
        x = as_tensor(x)
        n, d = x.shape
        alpha, beta = self.alpha_beta()
        diff = x - self.x0
        r = sqrt((diff * diff).sum(axis=1))
        h = 1.0 / (alpha + r)
        bh = beta * h
        y = x + reshape(bh, (n, 1)) * diff
        logdet = log(1.0 + bh) * (d - 1) + log(1.0 + bh - beta * r * h * h)
        return y, logdet

    def inverse(self, y, context=None):
        y = as_tensor(y).data
        with no_grad():
            alpha, beta = (t.item() for t in self.alpha_beta())
        diff_y = y - self.x0.data
        ry = np.linalg.norm(diff_y, axis=1)
        q = alpha + beta - ry
        r = 0.5 * (-q + np.sqrt(q * q + 4.0 * ry * alpha))
        scale = 1.0 + beta / (alpha + r)
        return Tensor(self.x0.data + diff_y / scale[:, None])


# -- image flows ---------------------------------------------------------------------------


def _as_image(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (x.shape[0], x.shape[1], 1, 1)), True
    return x, False


ACTNORM_STD_FLOOR = 1e-6


class ActNorm(Bijection):
    """Per-channel affine ``y = s * x + b`` with data-dependent initialization.

    The first forward pass in training mode sets ``s`` and ``b`` so that the
    batch leaves with zero mean and unit variance per channel.
    """

    kind = "actnorm"

    def __init__(self, channels: int):
        super().__init__()
        self.log_scale = param(np.zeros(channels))
        self.bias = param(np.zeros(channels))
        self.register_buffer("initialized", 0.0)

    @property
    def initialized(self) -> bool:
        return bool(self.buffer("initialized"))

    def initialize(self, x: np.ndarray) -> None:
        mean = channel_mean(Tensor(x)).data
        std = np.maximum(channel_std(Tensor(x)).data, ACTNORM_STD_FLOOR)
        self.log_scale.data = -np.log(std)
        self.bias.data = -mean / std
        self.register_buffer("initialized", 1.0)

    def forward(self, x, context=None):
        x, flat = _as_image(as_tensor(x))
        if self.training and not self.initialized:
            self.initialize(x.data)
        n, c, h, w = x.shape
        scale = reshape(exp(self.log_scale), (1, c, 1, 1))
        y = x * scale + reshape(self.bias, (1, c, 1, 1))
        logdet = _const_logdet(self.log_scale.sum() * (h * w), n)
        return (reshape(y, (n, c)) if flat else y), logdet

    def inverse(self, y, context=None):
        y = as_tensor(y).data
        flat = y.ndim == 2
        if flat:
            y = y[:, :, None, None]
        c = y.shape[1]
        x = (y - self.bias.data.reshape(1, c, 1, 1)) * np.exp(-self.log_scale.data).reshape(1, c, 1, 1)
        return Tensor(x[:, :, 0, 0] if flat else x)


class InvConv1x1(Bijection):
    """Invertible channel mixing ``y[:, :, i, j] = W x[:, :, i, j]`` with LU-factored ``W``."""

    kind = "inv_conv1x1"

    def __init__(self, channels: int, rng=None, weight=None, identity: bool = False):
        super().__init__()
        self.lu = LUWeight(channels, rng=rng, weight=weight, identity=identity)

    def forward(self, x, context=None):
        x, flat = _as_image(as_tensor(x))
        n, c, h, w = x.shape
        kernel = reshape(self.lu.weight(), (c, c, 1, 1))
        y = conv2d(x, kernel)
        logdet = _const_logdet(self.lu.log_abs_det() * (h * w), n)
        return (reshape(y, (n, c)) if flat else y), logdet

    def inverse(self, y, context=None):
        y = as_tensor(y).data
        flat = y.ndim == 2
        if flat:
            y = y[:, :, None, None]
        x = np.einsum("oc,nchw->nohw", self.lu.inverse_weight(), y)
        return Tensor(x[:, :, 0, 0] if flat else x)


def squeeze(x) -> Tensor:
    """Fold each 2x2 spatial block into 4 channels ordered (TL, TR, BL, BR)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial extents, got {h}x{w}")
    y = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, 4 * c, h // 2, w // 2))


def unsqueeze(y) -> Tensor:
    y = as_tensor(y)
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ValueError("unsqueeze needs a channel count divisible by 4")
    c = c4 // 4
    x = reshape(y, (n, c, 2, 2, h, w))
    x = transpose(x, (0, 1, 4, 2, 5, 3))
    return reshape(x, (n, c, 2 * h, 2 * w))


class Squeeze(Bijection):
    kind = "squeeze"

    def forward(self, x, context=None):
        x = as_tensor(x)
        return squeeze(x), _const_logdet(Tensor(0.0), x.shape[0])

    def inverse(self, y, context=None):
        return unsqueeze(y)


def split(x) -> tuple[Tensor, Tensor]:
    """Return ``(kept, factored)`` channel halves."""
    x = as_tensor(x)
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"split needs an even channel count, got {c}")
    return x[:, : c // 2], x[:, c // 2:]


def merge(kept, factored) -> Tensor:
    return concat([kept, factored], axis=1)


class Chain(Bijection):
    """Ordered composition; the log-det is the sum of member log-dets."""

    kind = "chain"

    def __init__(self, steps):
        super().__init__()
        self.steps = list(steps)

    def forward(self, x, context=None):
        y, total, _ = self.forward_trace(x, context)
        return y, total

    def forward_trace(self, x, context=None, prefix: str = ""):
        """Like ``forward`` but also returns ``[(name, logdet), ...]`` for every leaf bijection."""
        x = as_tensor(x)
        total = None
        trace = []
        for i, step in enumerate(self.steps):
            if isinstance(step, Chain):
                x, ld, inner = step.forward_trace(x, context, prefix=f"{prefix}{i}.")
                trace.extend(inner)
            else:
                x, ld = step.forward(x, context)
                name = f"{prefix}{i}.{step.kind}"
                trace.append((name, ld))
                hook = getattr(_hooks, "fn", None)
                if hook is not None:
                    hook(getattr(_hooks, "scope", "") + name, x, ld)
            total = ld if total is None else total + ld
        if total is None:
            total = Tensor(np.zeros(x.shape[0]))
        return x, total, trace

    def inverse(self, y, context=None):
        for step in reversed(self.steps):
            y = step.inverse(y, context)
        return as_tensor(y)
