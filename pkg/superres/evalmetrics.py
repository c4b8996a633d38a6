"""
Full-reference metrics on the luma plane.

Y uses full-range BT.601 weights on [0, 1] floats (no 16-235 offset). SSIM is
single-scale (scikit-image) with an 11x11 gaussian window (sigma 1.5),
C1 = 0.01**2, C2 = 0.03**2, averaged over the windows that fit inside the
image. PSNR of identical images is reported as ``PSNR_CAP``.
"""
import csv
import logging
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .core import check_image_batch, check_same_shape
from .data import list_images, load_image
from .exceptions import (
    ChannelCountError,
    ConfigError,
    ImageTooSmallError,
    MissingCounterpartError,
    ShapeMismatchError,
)
from .losses import perceptual_distance

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_C1 = SSIM_K1 ** 2
SSIM_C2 = SSIM_K2 ** 2
METRIC_COLUMNS = ('image_id', 'psnr_y', 'ssim_y', 'perceptual')
SUMMARY_ID = 'MEAN'


@dataclass(frozen=True)
class MetricRow:
    image_id: str
    psnr_y: float
    ssim_y: float
    perceptual: float


def rgb_to_y(image: torch.Tensor) -> torch.Tensor:
    """``(B, 3, H, W) -> (B, 1, H, W)`` luma in float64."""
    if image.dim() != 4 or image.shape[1] != 3:
        raise ChannelCountError(f"rgb_to_y expects (B, 3, H, W), got {tuple(image.shape)}")
    weights = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64, device=image.device).view(1, 3, 1, 1)
    return (image.to(torch.float64) * weights).sum(dim=1, keepdim=True)


def _luma_planes(image: torch.Tensor) -> np.ndarray:
    return rgb_to_y(image.detach()).squeeze(1).cpu().numpy()


def psnr_y_per_image(a: torch.Tensor, b: torch.Tensor) -> List[float]:
    check_same_shape(a, b, 'psnr inputs')
    scores = []
    for ya, yb in zip(_luma_planes(a), _luma_planes(b)):
        if np.array_equal(ya, yb):
            scores.append(PSNR_CAP)
            continue
        scores.append(min(float(peak_signal_noise_ratio(yb, ya, data_range=1.0)), PSNR_CAP))
    return scores


def psnr_y(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean over the batch of 10 log10(1 / mse) on Y, peak 1."""
    return math.fsum(psnr_y_per_image(a, b)) / a.shape[0]


def ssim_y_per_image(a: torch.Tensor, b: torch.Tensor) -> List[float]:
    check_same_shape(a, b, 'ssim inputs')
    height, width = a.shape[-2:]
    if min(height, width) < SSIM_WINDOW:
        raise ImageTooSmallError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {height}x{width}")
    # sigma 1.5 with skimage's default truncate of 3.5 gives the 11x11 window;
    # the reported mean covers only windows that fit inside the image.
    return [float(structural_similarity(ya, yb, gaussian_weights=True, sigma=SSIM_SIGMA,
                                        use_sample_covariance=False, data_range=1.0,
                                        K1=SSIM_K1, K2=SSIM_K2))
            for ya, yb in zip(_luma_planes(a), _luma_planes(b))]


def ssim_y(a: torch.Tensor, b: torch.Tensor) -> float:
    return math.fsum(ssim_y_per_image(a, b)) / a.shape[0]


def evaluate_tensors(sr: torch.Tensor, gt: torch.Tensor, image_ids: Sequence[str],
                     extractor=None) -> List[MetricRow]:
    check_image_batch(sr, 'sr')
    check_same_shape(sr, gt, 'sr and gt')
    if len(image_ids) != sr.shape[0]:
        raise ShapeMismatchError(f"{len(image_ids)} ids for a batch of {sr.shape[0]}")
    psnrs = psnr_y_per_image(sr, gt)
    ssims = ssim_y_per_image(sr, gt)
    rows = []
    with torch.no_grad():
        for i, image_id in enumerate(image_ids):
            distance = 0.0
            if extractor is not None:
                distance = float(perceptual_distance(sr[i:i + 1], gt[i:i + 1], extractor))
            rows.append(MetricRow(image_id, psnrs[i], ssims[i], distance))
    return rows


def summarize(rows: Sequence[MetricRow]) -> MetricRow:
    count = len(rows)
    return MetricRow(SUMMARY_ID,
                     math.fsum(r.psnr_y for r in rows) / count,
                     math.fsum(r.ssim_y for r in rows) / count,
                     math.fsum(r.perceptual for r in rows) / count)


def evaluate_pairs(sr_dir, gt_dir, extractor=None) -> Tuple[List[MetricRow], MetricRow]:
    """One row per file name present in both directories, sorted by name, plus the means."""
    sr_files = {p.name: p for p in list_images(sr_dir)}
    gt_files = {p.name: p for p in list_images(gt_dir)}
    offenders = sorted(set(sr_files) ^ set(gt_files))
    if offenders:
        raise MissingCounterpartError(f"{len(offenders)} images lack a counterpart: {offenders}", offenders)
    if not sr_files:
        raise MissingCounterpartError(f"no image pairs between {sr_dir} and {gt_dir}")
    rows = []
    for name in sorted(sr_files):
        sr, gt = load_image(sr_files[name]), load_image(gt_files[name])
        rows.extend(evaluate_tensors(sr, gt, [name], extractor))
    summary = summarize(rows)
    logger.info("Evaluated %d pairs: PSNR-Y %.4f dB, SSIM-Y %.4f", len(rows), summary.psnr_y, summary.ssim_y)
    return rows, summary


def read_external_scores(path) -> Tuple[List[str], Dict[str, Dict[str, str]]]:
    """Per-image columns from an outside scorer, keyed by ``image_id``."""
    with open(path, newline='', encoding='utf-8') as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or 'image_id' not in reader.fieldnames:
            raise MissingCounterpartError(f"{path} has no image_id column")
        columns = [c for c in reader.fieldnames if c != 'image_id' and c not in METRIC_COLUMNS]
        scores = {row['image_id']: {c: row[c] for c in columns} for row in reader}
    return columns, scores


def write_metrics_csv(rows: Sequence[MetricRow], summary: MetricRow, path,
                      external: Optional[Tuple[List[str], Dict[str, Dict[str, str]]]] = None):
    columns, scores = external if external is not None else ([], {})
    if external is not None:
        missing = sorted(r.image_id for r in rows if r.image_id not in scores)
        if missing:
            raise MissingCounterpartError(f"external scores lack {missing}", missing)
    means = []
    for column in columns:
        try:
            values = [float(scores[row.image_id][column]) for row in rows]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"external score column '{column}' is not numeric: {exc}",
                              key='external_scores') from exc
        means.append(math.fsum(values) / len(values))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow([f.name for f in fields(MetricRow)] + columns)
        for row in rows:
            writer.writerow(list(astuple(row)) + [scores[row.image_id][c] for c in columns])
        writer.writerow(list(astuple(summary)) + means)
