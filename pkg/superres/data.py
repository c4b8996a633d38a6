"""
Synthetic LR/HR pairs: a seeded degradation pipeline, 8-bit image I/O,
dataset manifests and a torch ``Dataset`` that regenerates pairs from one.

Degradation stages always run in this order and are skipped when neutral:

    gaussian blur -> bicubic downscale -> additive gaussian noise -> lossy compression

Noise sigma is expressed in [0, 1] intensity units.
"""
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, features
from scipy.ndimage import gaussian_filter
from torch.utils.data import Dataset

from .core import check_image_batch, derive_sample_seed, numpy_rng
from .exceptions import ConfigError, DivisibilityError, EmptyDatasetError, InvalidRangeError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.png', '.bmp', '.tif', '.tiff', '.ppm', '.jpg', '.jpeg')
MANIFEST_COLUMNS = ('gt_path', 'offset_y', 'offset_x', 'sample_seed')


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma: float = 1.0
    downscale: int = 4
    noise_sigma: float = 0.02
    jpeg_quality: Optional[int] = 75

    def __post_init__(self):
        if not (math.isfinite(self.blur_sigma) and self.blur_sigma >= 0):
            raise InvalidRangeError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.downscale < 1:
            raise InvalidRangeError(f"downscale must be >= 1, got {self.downscale}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise InvalidRangeError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise InvalidRangeError(f"jpeg_quality must lie in [1, 100], got {self.jpeg_quality}")


def jpeg_available() -> bool:
    return bool(features.check_codec('jpg'))


def compression_mode(config: DegradationConfig) -> str:
    if config.jpeg_quality is None:
        return 'none'
    return 'jpeg' if jpeg_available() else 'quantize'


def _to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)


def _jpeg_round_trip(batch: np.ndarray, quality: int) -> np.ndarray:
    out = np.empty_like(batch)
    for i, image in enumerate(batch):
        buffer = io.BytesIO()
        Image.fromarray(_to_uint8(image.transpose(1, 2, 0))).save(buffer, format='JPEG', quality=quality)
        buffer.seek(0)
        decoded = np.asarray(Image.open(buffer).convert('RGB'), dtype=np.float64) / 255.0
        out[i] = decoded.transpose(2, 0, 1)
    return out


def degrade(gt: torch.Tensor, config: DegradationConfig, seed: int) -> torch.Tensor:
    """Degrade a GT batch; deterministic in ``(gt, config, seed)``."""
    check_image_batch(gt, 'gt')
    height, width = gt.shape[-2:]
    factor = config.downscale
    if height % factor or width % factor:
        raise DivisibilityError(f"gt {height}x{width} is not divisible by downscale {factor}")

    image = gt.detach().cpu().to(torch.float64).numpy()
    if config.blur_sigma > 0:
        image = gaussian_filter(image, sigma=(0, 0, config.blur_sigma, config.blur_sigma), mode='reflect')
    if factor > 1:
        small = F.interpolate(torch.from_numpy(image).float(), size=(height // factor, width // factor),
                              mode='bicubic', align_corners=False, antialias=True)
        image = small.to(torch.float64).numpy()
    if config.noise_sigma > 0:
        image = image + numpy_rng(seed).normal(0.0, config.noise_sigma, size=image.shape)
    mode = compression_mode(config)
    if mode == 'jpeg':
        image = _jpeg_round_trip(image, config.jpeg_quality)
    elif mode == 'quantize':
        image = _to_uint8(image).astype(np.float64) / 255.0
    image = np.clip(image, 0.0, 1.0)
    return torch.from_numpy(image).to(dtype=gt.dtype, device=gt.device)


def load_image(path) -> torch.Tensor:
    """Read an RGB raster as a ``(1, 3, H, W)`` float32 batch in [0, 1]."""
    with Image.open(path) as img:
        array = np.asarray(img.convert('RGB'), dtype=np.uint8)
    return torch.from_numpy(array.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def save_image(image: torch.Tensor, path):
    """Write a ``(3, H, W)`` or single-item batch as 8-bit PNG, rounding x * 255."""
    if image.dim() == 4:
        if image.shape[0] != 1:
            raise InvalidRangeError(f"save_image takes one image, got a batch of {image.shape[0]}")
        image = image[0]
    check_image_batch(image.unsqueeze(0))
    array = _to_uint8(image.detach().cpu().to(torch.float64).numpy().transpose(1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format='PNG')


@dataclass(frozen=True)
class ManifestEntry:
    gt_path: str
    offset_y: int
    offset_x: int
    sample_seed: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    config_hash: str
    crop_size: int
    compression: str = 'none'

    def __len__(self):
        return len(self.entries)


@dataclass
class PairSample:
    lr: torch.Tensor
    gt: torch.Tensor
    seed_used: int


def degradation_hash(config: DegradationConfig, crop_size: int, global_seed: int) -> str:
    payload = {'degradation': asdict(config), 'crop_size': crop_size, 'global_seed': global_seed}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def build_manifest(gt_dir, crop_size: int, config: DegradationConfig, global_seed: int) -> DatasetManifest:
    """Deterministic crop offsets and per-sample seeds for every image in ``gt_dir``."""
    paths = list_images(gt_dir)
    if not paths:
        raise EmptyDatasetError(f"no images found in {gt_dir}")
    if crop_size < 1:
        raise InvalidRangeError(f"crop_size must be >= 1, got {crop_size}")
    if crop_size % config.downscale:
        raise DivisibilityError(f"crop_size {crop_size} is not divisible by downscale {config.downscale}")
    entries = []
    for index, path in enumerate(paths):
        with Image.open(path) as img:
            width, height = img.size
        if crop_size > min(height, width):
            raise InvalidRangeError(f"crop_size {crop_size} exceeds {path} ({height}x{width})")
        sample_seed = derive_sample_seed(global_seed, index)
        rng = numpy_rng(sample_seed)
        offset_y = int(rng.integers(0, height - crop_size + 1))
        offset_x = int(rng.integers(0, width - crop_size + 1))
        entries.append(ManifestEntry(path.as_posix(), offset_y, offset_x, sample_seed))
    manifest = DatasetManifest(tuple(entries), degradation_hash(config, crop_size, global_seed),
                               crop_size, compression_mode(config))
    logger.info("Built manifest of %d samples (config_hash=%s, compression=%s)",
                len(entries), manifest.config_hash[:12], manifest.compression)
    return manifest


def write_manifest(manifest: DatasetManifest, path):
    lines = [f"# config_hash={manifest.config_hash} crop_size={manifest.crop_size} "
             f"compression={manifest.compression}",
             '\t'.join(MANIFEST_COLUMNS)]
    for e in manifest.entries:
        lines.append(f"{e.gt_path}\t{e.offset_y}\t{e.offset_x}\t{e.sample_seed}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8', newline='\n')


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding='utf-8').splitlines()
    if len(lines) < 2 or not lines[0].startswith('#'):
        raise ConfigError(f"{path} is not a dataset manifest", key='manifest')
    try:
        header = dict(item.split('=', 1) for item in lines[0][1:].split())
        entries = []
        for line in lines[2:]:
            if not line.strip():
                continue
            gt_path, offset_y, offset_x, sample_seed = line.split('\t')
            entries.append(ManifestEntry(gt_path, int(offset_y), int(offset_x), int(sample_seed)))
        manifest = DatasetManifest(tuple(entries), header['config_hash'], int(header['crop_size']),
                                   header.get('compression', 'none'))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed manifest {path}: {exc}", key='manifest') from exc
    if not entries:
        raise EmptyDatasetError(f"manifest {path} lists no samples")
    return manifest


def generate_pair(entry: ManifestEntry, crop_size: int, config: DegradationConfig) -> PairSample:
    image = load_image(entry.gt_path)
    gt = image[..., entry.offset_y:entry.offset_y + crop_size, entry.offset_x:entry.offset_x + crop_size]
    if tuple(gt.shape[-2:]) != (crop_size, crop_size):
        raise InvalidRangeError(f"crop at ({entry.offset_y}, {entry.offset_x}) falls outside {entry.gt_path}")
    lr = degrade(gt.contiguous(), config, entry.sample_seed)
    return PairSample(lr=lr, gt=gt.contiguous(), seed_used=entry.sample_seed)


def write_pairs(manifest: DatasetManifest, config: DegradationConfig, out_dir) -> List[str]:
    """Write ``lr/`` and ``gt/`` PNGs for every manifest entry, named after the source file."""
    out_dir = Path(out_dir)
    names = []
    for entry in manifest.entries:
        name = Path(entry.gt_path).stem + '.png'
        if name in names:
            raise ConfigError(f"two manifest entries map to {name}", key='manifest')
        pair = generate_pair(entry, manifest.crop_size, config)
        save_image(pair.lr, out_dir / 'lr' / name)
        save_image(pair.gt, out_dir / 'gt' / name)
        names.append(name)
    return names


class SyntheticPairDataset(Dataset):
    """Pairs regenerated from a manifest; items are ``(lr, gt)`` of shape ``(3, h, w)``."""

    def __init__(self, manifest: DatasetManifest, config: DegradationConfig, cache: bool = True):
        if not manifest.entries:
            raise EmptyDatasetError("manifest lists no samples")
        self.manifest = manifest
        self.config = config
        self.cache = cache
        self._pairs = {}

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, index):
        if index in self._pairs:
            return self._pairs[index]
        pair = generate_pair(self.manifest.entries[index], self.manifest.crop_size, self.config)
        item = (pair.lr[0], pair.gt[0])
        if self.cache:
            self._pairs[index] = item
        return item

    def batch_indices(self, step: int, batch_size: int, seed: int) -> List[int]:
        """
        Indices of the batch at ``step``. Samples are drawn without replacement
        from a per-epoch permutation, so the order depends on (step, seed) only.
        """
        n = len(self)
        indices = []
        for position in range(step * batch_size, (step + 1) * batch_size):
            epoch, offset = divmod(position, n)
            order = numpy_rng(derive_sample_seed(seed, epoch)).permutation(n)
            indices.append(int(order[offset]))
        return indices

    def batch(self, indices: Sequence[int]) -> PairSample:
        items = [self[i] for i in indices]
        return PairSample(lr=torch.stack([lr for lr, _ in items]), gt=torch.stack([gt for _, gt in items]),
                          seed_used=self.manifest.entries[indices[0]].sample_seed)


def make_synthetic_images(out_dir, count: int, size: int = 64, seed: int = 0) -> List[Path]:
    """Write ``count`` seeded textured 8-bit RGB images (gradients, stripes, rectangles)."""
    if count < 1 or size < 1:
        raise InvalidRangeError("count and size must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    paths = []
    for index in range(count):
        rng = numpy_rng(derive_sample_seed(seed, index))
        base = rng.uniform(0.2, 0.8, size=3)
        tilt = rng.uniform(-0.3, 0.3, size=(3, 2))
        image = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
        angle = rng.uniform(0, math.pi)
        frequency = rng.uniform(2.0, 8.0)
        stripes = np.sin(2 * math.pi * frequency * (np.cos(angle) * xx + np.sin(angle) * yy))
        image += rng.uniform(0.05, 0.2, size=3)[:, None, None] * stripes
        for _ in range(int(rng.integers(1, 4))):
            y0, x0 = rng.integers(0, size, size=2)
            h, w = rng.integers(size // 8 + 1, size // 2 + 1, size=2)
            image[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, size=3)[:, None, None]
        path = out_dir / f"img_{index:03d}.png"
        Image.fromarray(_to_uint8(image.transpose(1, 2, 0))).save(path, format='PNG')
        paths.append(path)
    logger.info("Wrote %d synthetic %dx%d images to %s", count, size, size, out_dir)
    return paths
