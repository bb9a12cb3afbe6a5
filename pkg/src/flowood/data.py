"""Image ingestion (PNG, binary PPM) and synthetic texture corpora."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageDecodeError(ValueError):
    pass


# -- PPM ------------------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated PPM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise ImageDecodeError(f"bad PPM header token {data[start:pos]!r}") from None
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise ImageDecodeError("not a binary PPM (P6) file")
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    if maxval != 255 or w < 1 or h < 1:
        raise ImageDecodeError("only 8-bit P6 images are supported")
    payload = data[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ImageDecodeError("truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


# -- generic ---------------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Decode a PNG or P6 file to ``uint8`` (H, W, 3)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, SyntaxError, ValueError) as exc:
            raise ImageDecodeError(f"cannot decode PNG: {exc}") from None
    raise ImageDecodeError("unsupported image format (expected PNG or P6 PPM)")


def write_png(path, img: np.ndarray) -> None:
    """Write ``uint8`` (H, W) or (H, W, 3) with fixed encoder settings."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Image.fromarray(img).save(path, format="PNG", optimize=False, compress_level=6)


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img01) * 255.0), 0, 255).astype(np.uint8)


def center_crop_downsample(img: np.ndarray, extent: int) -> np.ndarray:
    """Center-crop (H, W, C) to a square and box-filter it down to ``extent``."""
    h, w = img.shape[:2]
    side = (min(h, w) // extent) * extent
    if side < extent:
        raise ImageDecodeError(f"image {h}x{w} is smaller than the target extent {extent}")
    top, left = (h - side) // 2, (w - side) // 2
    crop = img[top:top + side, left:left + side].astype(np.float64)
    f = side // extent
    boxed = crop.reshape(extent, f, extent, f, -1).mean(axis=(1, 3))
    return np.clip(np.rint(boxed), 0, 255).astype(np.uint8)


@dataclass
class DatasetSpec:
    root: Path
    extent: int
    channels: int = 3

    def files(self) -> list[Path]:
        root = Path(self.root)
        if not root.is_dir():
            raise FileNotFoundError(f"data directory not found: {root}")
        return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N, C, H, W)
    ids: list
    failures: list  # (path, reason)


def to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if channels == 3:
        return img
    if channels == 1:
        return np.rint(img.astype(np.float64).mean(axis=2, keepdims=True)).astype(np.uint8)
    raise ValueError("channels must be 1 or 3")


def load_dataset(spec: DatasetSpec) -> Dataset:
    images, ids, failures = [], [], []
    root = Path(spec.root)
    for path in spec.files():
        try:
            img = center_crop_downsample(read_image(path), spec.extent)
        except (ImageDecodeError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            failures.append((str(path), str(exc)))
            continue
        images.append(to_channels(img, spec.channels).transpose(2, 0, 1))
        ids.append(path.relative_to(root).as_posix())
    arr = np.stack(images) if images else np.zeros((0, spec.channels, spec.extent, spec.extent), np.uint8)
    return Dataset(arr, ids, failures)


def save_dataset(directory, images: np.ndarray, prefix: str = "img", fmt: str = "png") -> list[Path]:
    """Write uint8 (N, C, H, W) images as numbered files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        hwc = np.asarray(img).transpose(1, 2, 0)
        path = directory / f"{prefix}_{i:05d}.{fmt}"
        if fmt == "ppm":
            if hwc.shape[2] == 1:
                hwc = np.repeat(hwc, 3, axis=2)
            path.write_bytes(encode_ppm(hwc))
        else:
            write_png(path, hwc)
        paths.append(path)
    return paths


# -- synthetic textures ----------------------------------------------------------------------


def smooth_gradients(n: int, size: int, channels: int = 3, seed: int = 0) -> np.ndarray:
    """Ramps at random orientation plus a per-channel low-pass random field.

    In-distribution class of the texture benchmark. The field keeps the wavelet
    details from being an exact function of the coarser levels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1) - 0.5
    out = np.empty((n, channels, size, size))
    for i in range(n):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        base = rng.uniform(0.3, 0.7, channels)
        slope = rng.uniform(0.2, 0.5) * rng.uniform(0.7, 1.0, channels)
        field = scipy.ndimage.gaussian_filter(rng.standard_normal((channels, size, size)),
                                              sigma=(0, size / 8, size / 8), mode="wrap")
        field /= field.std(axis=(1, 2), keepdims=True)
        out[i] = base[:, None, None] + slope[:, None, None] * ramp + 0.05 * field
    return to_uint8(out)


def stripes(n: int, size: int, channels: int = 3, seed: int = 0) -> np.ndarray:
    """High-frequency stripe patterns; out-of-distribution class of the texture benchmark."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.empty((n, channels, size, size))
    for i in range(n):
        period = rng.choice([2, 3])
        direction = rng.integers(3)
        coord = (xx, yy, xx + yy)[direction]
        wave = np.where((coord + rng.integers(period)) % period == 0, 0.5, -0.5)
        base = rng.uniform(0.3, 0.7, channels)
        contrast = rng.uniform(0.2, 0.5)
        out[i] = base[:, None, None] + contrast * wave[None]
    return to_uint8(out)


def white_noise(n: int, size: int, channels: int = 1, seed: int = 0, std: float = 0.15) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return to_uint8(0.5 + std * rng.standard_normal((n, channels, size, size)))


SYNTHETIC_KINDS = {"smooth": smooth_gradients, "stripes": stripes, "noise": white_noise}
