"""
Shared domain types: image/latent conventions, the diffusion noise schedule,
run configuration and the seeding policy.

Pixel tensors cross module boundaries as ``(B, 3, H, W)`` floats in [0, 1].
Latents are ``(B, C_lat, H/f, W/f)`` and unbounded.
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .exceptions import (
    ChannelCountError,
    InvalidRangeError,
    OutOfRangeError,
    ShapeMismatchError,
)

# Aliases documenting tensor roles in signatures.
ImageBatch = torch.Tensor
LatentBatch = torch.Tensor

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_INDEX_MULTIPLIER = 0xD1B54A32D192ED03


def check_image_batch(image: torch.Tensor, name: str = 'image') -> torch.Tensor:
    """Validate the ImageBatch contract (rank 4, RGB, non-empty dims)."""
    if not isinstance(image, torch.Tensor) or image.dim() != 4:
        raise ShapeMismatchError(f"{name} must be a rank-4 tensor (B, C, H, W)")
    batch, channels, height, width = image.shape
    if channels != 3:
        raise ChannelCountError(f"{name} must have 3 channels, got {channels}")
    if batch < 1 or height < 1 or width < 1:
        raise ShapeMismatchError(f"{name} has an empty dimension: {tuple(image.shape)}")
    return image


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = 'inputs'):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta DDPM schedule. Tensors are float64 and never mutated."""
    T: int
    betas: torch.Tensor
    alpha_bars: torch.Tensor
    beta_start: float
    beta_end: float

    def describe(self) -> dict:
        return {
            'family': 'linear',
            'T': self.T,
            'beta_start': self.beta_start,
            'beta_end': self.beta_end,
        }


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """
    Build a linear noise schedule.

    Args:
        T: number of diffusion steps
        beta_start: first beta, strictly positive
        beta_end: last beta, below one and not below beta_start

    Returns:
        DiffusionSchedule with alpha_bars[t] = prod_{i<=t} (1 - betas[i])
    """
    if T < 1:
        raise InvalidRangeError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return DiffusionSchedule(T=T, betas=betas, alpha_bars=alpha_bars,
                             beta_start=float(beta_start), beta_end=float(beta_end))


def alpha_bar_at(schedule: DiffusionSchedule, t: int) -> float:
    if not 0 <= t < schedule.T:
        raise OutOfRangeError(f"time-step {t} outside [0, {schedule.T})")
    return float(schedule.alpha_bars[t])


def derive_sample_seed(global_seed: int, sample_index: int) -> int:
    """
    Mix a run seed and a sample index into an independent 64-bit seed.

    The mixer is one SplitMix64 step applied to
    ``global_seed XOR (sample_index * 0xD1B54A32D192ED03) mod 2**64``.
    For a fixed run seed it is a bijection in the index, and
    ``derive_sample_seed(0, 0) == 0xE220A8397B1DCDAF``.
    """
    if sample_index < 0:
        raise InvalidRangeError(f"sample_index must be >= 0, got {sample_index}")
    state = (global_seed ^ (sample_index * _INDEX_MULTIPLIER)) & _MASK64
    z = (state + _GOLDEN_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def make_generator(seed: int, device: str = 'cpu') -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(seed & _MASK64)
    return generator


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed & _MASK64)


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed & _MASK64)
        yield


def _default_loss_weights():
    from .losses import LossWeights
    return LossWeights()


def _default_candidates():
    from .dtsm import CandidateSet
    return CandidateSet()


def _default_selector():
    from .dtsm import SelectorConfig
    return SelectorConfig()


def _default_degradation():
    from .data import DegradationConfig
    return DegradationConfig()


def _default_optimizer():
    from .trainer import OptimizerConfig
    return OptimizerConfig()


def _default_backbone():
    from .backbones import BackboneConfig
    return BackboneConfig()


def _default_attributes():
    from .owms import AttributeRegistry
    return AttributeRegistry()


def _default_provider():
    from .owms import ProviderConfig
    return ProviderConfig()


@dataclass(frozen=True)
class PathsConfig:
    gt_dir: Optional[str] = None
    data_dir: str = 'data'
    manifest: Optional[str] = None
    out_dir: str = 'runs'
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, fully resolved. Built by ``superres.config``."""
    seed: int = 0
    scale_factor: int = 4
    learning_rate: float = 5e-5
    batch_size: int = 2
    steps: int = 200
    crop_size: int = 64
    log_every: int = 10
    checkpoint_every: int = 0
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss_weights: 'LossWeights' = field(default_factory=_default_loss_weights)  # noqa: F821
    candidate_set: 'CandidateSet' = field(default_factory=_default_candidates)  # noqa: F821
    selector: 'SelectorConfig' = field(default_factory=_default_selector)  # noqa: F821
    degradation: 'DegradationConfig' = field(default_factory=_default_degradation)  # noqa: F821
    optimizer: 'OptimizerConfig' = field(default_factory=_default_optimizer)  # noqa: F821
    backbone: 'BackboneConfig' = field(default_factory=_default_backbone)  # noqa: F821
    attributes: 'AttributeRegistry' = field(default_factory=_default_attributes)  # noqa: F821
    provider: 'ProviderConfig' = field(default_factory=_default_provider)  # noqa: F821
    extractor: str = 'toy'
    fixed_timestep: Optional[int] = None
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.scale_factor < 1:
            raise InvalidRangeError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise InvalidRangeError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidRangeError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise InvalidRangeError(f"steps must be >= 0, got {self.steps}")

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.schedule_T, self.beta_start, self.beta_end)
