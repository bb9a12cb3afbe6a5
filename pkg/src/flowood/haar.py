"""Orthonormal 2D Haar analysis/synthesis and multi-level pyramids.

Arrays are channel-first with any number of leading axes: ``(..., C, H, W)``.
Detail stacks interleave orientations per image channel, so detail channel
``3 * c + k`` holds orientation ``DETAIL_ORDER[k]`` of image channel ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DETAIL_ORDER = ("horizontal", "vertical", "diagonal")

# rows: low, horizontal, vertical, diagonal; columns: a, b, c, d of block [[a, b], [c, d]]
HAAR_MATRIX = 0.5 * np.array([
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
])


def haar_analyze(img):
    """Split ``(..., C, 2h, 2w)`` into ``(low (..., C, h, w), detail (..., 3C, h, w), logdet=0.0)``."""
    img = np.asarray(img, dtype=np.float64)
    h2, w2 = img.shape[-2:]
    if h2 % 2 or w2 % 2:
        raise ValueError(f"Haar analysis needs even extents, got {h2}x{w2}")
    a = img[..., 0::2, 0::2]
    b = img[..., 0::2, 1::2]
    c = img[..., 1::2, 0::2]
    d = img[..., 1::2, 1::2]
    low = 0.5 * (a + b + c + d)
    horizontal = 0.5 * (a + b - c - d)
    vertical = 0.5 * (a - b + c - d)
    diagonal = 0.5 * (a - b - c + d)
    detail = np.stack([horizontal, vertical, diagonal], axis=-3)  # (..., C, 3, h, w)
    lead = detail.shape[:-4]
    chans, h, w = detail.shape[-4], detail.shape[-2], detail.shape[-1]
    return low, detail.reshape(*lead, 3 * chans, h, w), 0.0


def haar_synthesize(low, detail):
    """Exact inverse of :func:`haar_analyze`."""
    low = np.asarray(low, dtype=np.float64)
    detail = np.asarray(detail, dtype=np.float64)
    chans, h, w = low.shape[-3:]
    if detail.shape[-3:] != (3 * chans, h, w) or detail.shape[:-3] != low.shape[:-3]:
        raise ValueError(f"detail shape {detail.shape} does not match low shape {low.shape}")
    lead = low.shape[:-3]
    det = detail.reshape(*lead, chans, 3, h, w)
    hz, vt, dg = det[..., 0, :, :], det[..., 1, :, :], det[..., 2, :, :]
    out = np.empty((*lead, chans, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = 0.5 * (low + hz + vt + dg)
    out[..., 0::2, 1::2] = 0.5 * (low + hz - vt - dg)
    out[..., 1::2, 0::2] = 0.5 * (low - hz + vt - dg)
    out[..., 1::2, 1::2] = 0.5 * (low - hz - vt + dg)
    return out


@dataclass
class HaarPyramid:
    """``lows[i]`` has extent ``2**i``; ``details[i]`` refines ``lows[i]`` into ``lows[i + 1]``."""

    lows: list
    details: list

    @property
    def levels(self) -> int:
        return len(self.details)

    def reconstruct(self) -> np.ndarray:
        img = self.lows[0]
        for d in self.details:
            img = haar_synthesize(img, d)
        return img

    def coefficient_count(self) -> int:
        base = int(np.prod(self.lows[0].shape[-3:]))
        return base + sum(int(np.prod(d.shape[-3:])) for d in self.details)


def num_levels(extent: int) -> int:
    n = int(extent).bit_length() - 1
    if extent < 1 or 2**n != extent:
        raise ValueError(f"extent {extent} is not a power of two")
    return n


def build_pyramid(img) -> HaarPyramid:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if h != w:
        raise ValueError(f"pyramid needs square images, got {h}x{w}")
    n = num_levels(h)
    lows = [img]
    details = []
    cur = img
    for _ in range(n):
        cur, det, _ = haar_analyze(cur)
        lows.append(cur)
        details.append(det)
    lows.reverse()
    details.reverse()
    return HaarPyramid(lows, details)
