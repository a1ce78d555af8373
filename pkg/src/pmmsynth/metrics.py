"""PSNR / SSIM kernels and the per-task evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pmmsynth.datamodel import MODALITY_NAMES, Modality, ModalityMask, MultiModalSample
from pmmsynth.errors import InvalidTaskError, ShapeError, ValidationError

PSNR_CAP_DB = 100.0


def psnr(y: np.ndarray, y_hat: np.ndarray, max_value: float = 1.0) -> float:
    """``10 log10(MAX^2 / MSE)``; returns ``inf`` when the images are identical."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"psnr: shapes {y.shape} and {y_hat.shape} differ")
    if not max_value > 0:
        raise ValidationError("psnr: max_value must be positive")
    mse = float(np.mean((y - y_hat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


@dataclass(frozen=True)
class SSIMParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    def window(self) -> np.ndarray:
        """1-D Gaussian taps summing to one (the 2-D window is their outer product)."""
        r = np.arange(self.window_size, dtype=np.float64) - (self.window_size - 1) / 2.0
        g = np.exp(-(r**2) / (2.0 * self.sigma**2))
        return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = sliding_window_view(img, k, axis=0) @ taps
    return sliding_window_view(rows, k, axis=1) @ taps


def ssim_map(y: np.ndarray, y_hat: np.ndarray, params: SSIMParams = SSIMParams()) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 2:
        raise ShapeError(f"ssim: need two equal 2-D images, got {y.shape} and {y_hat.shape}")
    if min(y.shape) < params.window_size:
        raise ShapeError(f"ssim: image {y.shape} smaller than the {params.window_size}px window")
    w = params.window()
    mu_a, mu_b = _filter_valid(y, w), _filter_valid(y_hat, w)
    var_a = _filter_valid(y * y, w) - mu_a * mu_a
    var_b = _filter_valid(y_hat * y_hat, w) - mu_b * mu_b
    cov = _filter_valid(y * y_hat, w) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(y: np.ndarray, y_hat: np.ndarray, params: SSIMParams = SSIMParams()) -> float:
    return float(np.mean(ssim_map(y, y_hat, params)))


@dataclass(frozen=True)
class MetricRow:
    task: str
    dataset: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    count: int
    skipped: int = 0

    def formatted(self) -> tuple[str, str]:
        return (f"{self.psnr_mean:.2f}±{self.psnr_std:.2f}", f"{self.ssim_mean:.4f}±{self.ssim_std:.4f}")


def task_label(sources: ModalityMask, target: Modality | int) -> str:
    return f"{sources.label()}→{MODALITY_NAMES[int(target)]}"


def aggregate(task: str, dataset: str, psnrs: Sequence[float], ssims: Sequence[float], skipped: int = 0) -> MetricRow:
    if not psnrs:
        raise InvalidTaskError(f"task {task} on {dataset}: no evaluable samples")
    p = np.minimum(np.asarray(psnrs, dtype=np.float64), PSNR_CAP_DB)
    s = np.asarray(ssims, dtype=np.float64)
    return MetricRow(task, dataset, float(p.mean()), float(p.std()), float(s.mean()), float(s.std()), len(p), skipped)


# (images with non-source channels zeroed, source mask, dataset id) -> six-channel prediction
Synthesizer = Callable[[np.ndarray, ModalityMask, int], np.ndarray]


def evaluate_task(
    model: Synthesizer,
    samples: Iterable[MultiModalSample],
    sources: ModalityMask,
    target: Modality | int | str,
    dataset_name: str = "",
    params: SSIMParams = SSIMParams(),
) -> MetricRow:
    tgt = Modality.parse(target)
    if sources[tgt]:
        raise InvalidTaskError(f"target {tgt.name} is also a source")
    if sources.count == 0:
        raise InvalidTaskError("no source modality")
    psnrs: list[float] = []
    ssims: list[float] = []
    skipped = 0
    for s in samples:
        if not (sources.dominated_by(s.availability) and s.availability[tgt]):
            skipped += 1
            continue
        x = s.images * sources.as_array()[:, None, None]
        pred = np.asarray(model(x, sources, s.dataset_id))
        psnrs.append(psnr(s.images[tgt], pred[tgt]))
        ssims.append(ssim(s.images[tgt], pred[tgt], params))
    return aggregate(task_label(sources, tgt), dataset_name, psnrs, ssims, skipped)


def zero_baseline_psnr(samples: Iterable[MultiModalSample], target: Modality | int) -> float:
    """Mean PSNR of an all-zero prediction against the available target channels."""
    vals = [psnr(s.images[int(target)], np.zeros_like(s.images[int(target)])) for s in samples if s.availability[int(target)]]
    if not vals:
        raise InvalidTaskError("no sample carries the target modality")
    return float(np.mean(np.minimum(vals, PSNR_CAP_DB)))


METRIC_FIELDS = [f.name for f in fields(MetricRow)]


def write_metrics_csv(rows: Iterable[MetricRow], path: str | Path, extra: dict[str, str] | None = None) -> None:
    rows = list(rows)
    head = list(extra or {})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(head + METRIC_FIELDS + ["psnr", "ssim"])
        for r in rows:
            d = asdict(r)
            writer.writerow(
                [extra[k] for k in head]
                + [d[k] if isinstance(d[k], (str, int)) else f"{d[k]:.6f}" for k in METRIC_FIELDS]
                + list(r.formatted())
            )


def montage(rows: Sequence[Sequence[np.ndarray]], path: str | Path, scale: int = 4) -> None:
    """Write a grid of ``[0, 1]`` images (one list per row) as an 8-bit PNG."""
    from PIL import Image

    grid = np.concatenate([np.concatenate([np.clip(p, 0, 1) for p in row], axis=1) for row in rows], axis=0)
    img = Image.fromarray((grid * 255).round().astype(np.uint8))
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
