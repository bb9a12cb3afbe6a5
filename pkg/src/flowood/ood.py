"""Likelihood-based OOD evaluation: scoring, ROC/AUC, noise sweeps and radial PSD."""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from flowood.data import to_uint8
from flowood.distributions import bits_per_dim, dequantize
from flowood.tensor import no_grad
from flowood.waveletflow import WaveletFlowModel

SPLITS = ("train", "test", "ood")


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    split: str
    nll_nats: float
    bpd: float


@dataclass
class OodReport:
    records: list
    roc: list = field(default_factory=list)  # (threshold, fpr, tpr)
    auc: float = float("nan")


def image_rng(seed: int, sample_id: str, stream: int = 0) -> np.random.Generator:
    """Per-image generator so results do not depend on batching or thread count."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8")), stream])


def dequantize_images(images: np.ndarray, ids, seed: int) -> np.ndarray:
    out = np.empty(images.shape, dtype=np.float64)
    for i, sid in enumerate(ids):
        out[i] = dequantize(images[i], rng=image_rng(seed, sid))[0]
    return out


def _batches(n: int, size: int):
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def _parallel_map(fn, items, threads: int | None):
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def log_likelihoods(model, images: np.ndarray, ids, seed: int, batch_size: int = 32,
                    threads: int | None = 1) -> np.ndarray:
    """Per-image log-likelihood in nats (dequantization term included)."""
    model.eval()
    x = dequantize_images(np.asarray(images), ids, seed)

    def run(sl):
        with no_grad():
            return model.log_likelihood(x[sl]).data

    parts = _parallel_map(run, _batches(len(x), batch_size), threads)
    return np.concatenate(parts) if parts else np.zeros(0)


def score_dataset(model, images: np.ndarray, ids, split: str, seed: int = 0,
                  batch_size: int = 32, threads: int | None = 1) -> list[ScoreRecord]:
    """One record per image, ordered by sample id."""
    images = np.asarray(images)
    if len(images) != len(ids):
        raise ValueError("images and ids differ in length")
    ll = log_likelihoods(model, images, ids, seed, batch_size, threads)
    c, h, w = images.shape[1:]
    bpd = bits_per_dim(ll, h, w, c)
    records = [ScoreRecord(sid, split, float(-v), float(b)) for sid, v, b in zip(ids, ll, np.atleast_1d(bpd))]
    return sorted(records, key=lambda r: r.id)


# -- ROC --------------------------------------------------------------------------------------


def roc_auc(scores_in, scores_out):
    """ROC points ``(threshold, fpr, tpr)`` and AUC; higher score means in-distribution.

    Every distinct score is a threshold (predict "in" when ``score >= t``);
    ties across classes produce diagonal segments.
    """
    pos = np.asarray(scores_in, dtype=np.float64).ravel()
    neg = np.asarray(scores_out, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score lists must be nonempty")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValueError("scores must be finite")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    # counts of scores >= t, as integers so the area is an exact rational
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    tp = np.concatenate([[0], tp])
    fp = np.concatenate([[0], fp])
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * pos.size * neg.size)
    ths = np.concatenate([[np.inf], thresholds])
    points = [(float(t), f / neg.size, p / pos.size) for t, f, p in zip(ths, fp, tp)]
    return points, auc


def report(records) -> OodReport:
    """ROC of in-distribution (train/test) against ``ood`` records, score = -nll."""
    s_in = [-r.nll_nats for r in records if r.split != "ood"]
    s_out = [-r.nll_nats for r in records if r.split == "ood"]
    points, auc = roc_auc(s_in, s_out)
    return OodReport(list(records), points, auc)


# -- perturbations ----------------------------------------------------------------------------


def perturb_multiplicative(img01, sigma: float, seed=0, additive: bool = False, rng=None) -> np.ndarray:
    """``x * (1 + eps)`` (or ``x + eps``) with ``eps ~ N(0, sigma^2)``, clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(img01, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    if rng is None:
        rng = np.random.default_rng(seed)
    eps = sigma * rng.standard_normal(x.shape)
    return np.clip(x + eps if additive else x * (1.0 + eps), 0.0, 1.0)


def perturb_images(images: np.ndarray, ids, sigma: float, seed: int, additive: bool = False) -> np.ndarray:
    """Perturb uint8 images per sample id and requantize to uint8."""
    images = np.asarray(images)
    if sigma == 0:
        return images.copy()
    out = np.empty_like(images)
    for i, sid in enumerate(ids):
        noisy = perturb_multiplicative(images[i] / 255.0, sigma, additive=additive,
                                       rng=image_rng(seed, sid, stream=1))
        out[i] = to_uint8(noisy)
    return out


# -- per-level sweep --------------------------------------------------------------------------


@dataclass
class LevelSweep:
    sigmas: list
    levels: list
    values: dict  # (level, sigma) -> per-image BPD
    edges: dict  # level -> shared bin edges
    counts: dict  # (level, sigma) -> histogram counts

    def mean(self, level: int, sigma: float) -> float:
        return float(np.mean(self.values[(level, sigma)]))

    def rows(self):
        for level in self.levels:
            e = self.edges[level]
            for sigma in self.sigmas:
                for k, n in enumerate(self.counts[(level, sigma)]):
                    yield level, sigma, float(e[k]), float(e[k + 1]), int(n)


def per_level_bpd(model: WaveletFlowModel, images: np.ndarray, ids, seed: int,
                  batch_size: int = 32, threads: int | None = 1) -> np.ndarray:
    """BPD of every level, shape ``(n_levels + 1, N)``."""
    model.eval()
    x = dequantize_images(np.asarray(images), ids, seed)

    def run(sl):
        with no_grad():
            return np.stack([model.per_level_bpd(x[sl], level) for level in range(model.n_levels + 1)])

    parts = _parallel_map(run, _batches(len(x), batch_size), threads)
    return np.concatenate(parts, axis=1)


def per_level_sweep(model: WaveletFlowModel, images: np.ndarray, ids, sigmas, seed: int = 0,
                    bins: int = 20, additive: bool = False, threads: int | None = 1) -> LevelSweep:
    if not isinstance(model, WaveletFlowModel):
        raise TypeError("per-level sweeps need a Wavelet Flow model")
    sigmas = [float(s) for s in sigmas]
    levels = list(range(model.n_levels + 1))
    values = {}
    for sigma in sigmas:
        noisy = perturb_images(images, ids, sigma, seed, additive)
        bpd = per_level_bpd(model, noisy, ids, seed, threads=threads)
        for level in levels:
            values[(level, sigma)] = bpd[level]
    edges, counts = {}, {}
    for level in levels:
        pooled = np.concatenate([values[(level, s)] for s in sigmas])
        edges[level] = np.histogram_bin_edges(pooled, bins=bins)
        for s in sigmas:
            counts[(level, s)] = np.histogram(values[(level, s)], bins=edges[level])[0]
    return LevelSweep(sigmas, levels, values, edges, counts)


# -- power spectrum ---------------------------------------------------------------------------


@dataclass
class PsdCurve:
    radii: np.ndarray
    mean_power: np.ndarray
    counts: np.ndarray  # frequencies per radial bin
    boundaries: list
    mean_energy: float

    @property
    def total_power(self) -> float:
        return float(np.sum(self.mean_power * self.counts))


def luminance(images) -> np.ndarray:
    x = np.asarray(images)
    x = x / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)
    if x.ndim == 4:
        return x.mean(axis=1)
    if x.ndim == 3:
        return x
    raise ValueError("expected images of shape (N, C, H, W) or (N, H, W)")


def average_psd(images) -> PsdCurve:
    """Radially averaged power spectrum ``|F|^2 / (H W)`` of channel-mean luminance."""
    if isinstance(images, (list, tuple)):
        if len({np.shape(im) for im in images}) > 1:
            raise ValueError("all images must share one size")
        images = np.stack(images)
    gray = luminance(images)
    if len(gray) == 0:
        raise ValueError("no images")
    n_img, h, w = gray.shape
    power = np.abs(np.fft.fft2(gray)) ** 2 / (h * w)
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    radius = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)
    n_bins = radius.max() + 1
    counts = np.bincount(radius.ravel(), minlength=n_bins)
    sums = np.bincount(radius.ravel(), weights=power.mean(axis=0).ravel(), minlength=n_bins)
    present = counts > 0
    extent = min(h, w)
    boundaries = []
    k = 0
    while extent / 2 ** (k + 1) >= 1:
        boundaries.append(extent / 2 ** (k + 1))
        k += 1
    return PsdCurve(np.arange(n_bins)[present], sums[present] / counts[present], counts[present],
                    boundaries, float(np.mean(np.sum(gray**2, axis=(1, 2)))))


# -- CSV --------------------------------------------------------------------------------------


def fmt(x) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(x))


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_scores_csv(path, records) -> None:
    _write_lines(path, ["id,split,nll_nats,bpd"] +
                 [f"{r.id},{r.split},{fmt(r.nll_nats)},{fmt(r.bpd)}" for r in records])


def read_scores_csv(path) -> list[ScoreRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "id,split,nll_nats,bpd":
        raise CsvFormatError(f"{path}: line 1: expected header 'id,split,nll_nats,bpd'")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rsplit(",", 3)
        try:
            if len(parts) != 4:
                raise ValueError
            rec = ScoreRecord(parts[0], parts[1], float(parts[2]), float(parts[3]))
        except ValueError:
            raise CsvFormatError(f"{path}: line {lineno}: malformed record {line!r}") from None
        if rec.split not in SPLITS:
            raise CsvFormatError(f"{path}: line {lineno}: unknown split {rec.split!r}")
        if not math.isfinite(rec.nll_nats):
            raise CsvFormatError(f"{path}: line {lineno}: non-finite nll")
        records.append(rec)
    if not records:
        raise CsvFormatError(f"{path}: no records")
    return records


def write_roc_csv(path, points, auc: float) -> None:
    lines = ["threshold,fpr,tpr"] + [f"{fmt(t)},{fmt(f)},{fmt(p)}" for t, f, p in points]
    _write_lines(path, lines + [f"# auc={fmt(auc)}"])


def write_levels_csv(path, sweep: LevelSweep) -> None:
    _write_lines(path, ["level,sigma,bin_left,bin_right,count"] +
                 [f"{lv},{fmt(s)},{fmt(a)},{fmt(b)},{n}" for lv, s, a, b, n in sweep.rows()])


def write_psd_csv(path, curve: PsdCurve) -> None:
    lines = ["radius,mean_power"] + [f"{int(r)},{fmt(p)}" for r, p in zip(curve.radii, curve.mean_power)]
    _write_lines(path, lines + [f"# level_boundary={fmt(b)}" for b in curve.boundaries])
