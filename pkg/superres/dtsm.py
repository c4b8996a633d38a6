"""
Dynamic time-step selection.

A small convolutional network reads the low-resolution input and scores a
fixed set of candidate diffusion steps; Gumbel-Softmax turns the scores into
a hard choice whose gradient flows through the soft probabilities.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import check_image_batch, seeded
from .exceptions import InvalidRangeError, NumericError, ShapeMismatchError

logger = logging.getLogger(__name__)

# Smallest spatial side the shallow 3x3 convolution accepts.
MIN_INPUT_SIZE = 3
MAX_TIMESTEP = 999


class SelectionMode(str, Enum):
    TRAIN = 'train'
    INFER = 'infer'


@dataclass(frozen=True)
class CandidateSet:
    """Strictly increasing diffusion steps DTSM may choose from."""
    steps: Tuple[int, ...] = (199, 399, 599, 799, 999)

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, 'steps', steps)
        if not steps:
            raise InvalidRangeError("candidate set must not be empty")
        for step in steps:
            if not 0 <= step <= MAX_TIMESTEP:
                raise InvalidRangeError(f"candidate {step} outside [0, {MAX_TIMESTEP}]")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidRangeError(f"candidates must be strictly increasing, got {list(steps)}")

    def __len__(self):
        return len(self.steps)

    def __contains__(self, step):
        return step in self.steps

    @property
    def max_step(self) -> int:
        return self.steps[-1]

    def as_tensor(self, device=None) -> torch.Tensor:
        return torch.tensor(self.steps, dtype=torch.long, device=device)


@dataclass(frozen=True)
class SelectorConfig:
    conv_channels: int = 32
    n_resblocks: int = 4
    mlp_hidden: int = 128
    temperature: float = 1.0
    noise_enabled: bool = True
    # Exponential annealing towards temperature_min over anneal_steps; off when anneal_steps == 0.
    temperature_min: Optional[float] = None
    anneal_steps: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidRangeError(f"temperature must be > 0, got {self.temperature}")
        if self.n_resblocks < 1:
            raise InvalidRangeError(f"n_resblocks must be >= 1, got {self.n_resblocks}")
        if self.conv_channels < 1 or self.mlp_hidden < 1:
            raise InvalidRangeError("conv_channels and mlp_hidden must be >= 1")
        if self.temperature_min is not None and not 0 < self.temperature_min <= self.temperature:
            raise InvalidRangeError("temperature_min must lie in (0, temperature]")
        if self.anneal_steps < 0:
            raise InvalidRangeError("anneal_steps must be >= 0")

    def temperature_at(self, step: int) -> float:
        if self.anneal_steps == 0 or self.temperature_min is None:
            return self.temperature
        progress = min(step, self.anneal_steps) / self.anneal_steps
        return self.temperature * (self.temperature_min / self.temperature) ** progress


@dataclass
class GumbelSelection:
    """
    Outcome of one selection.

    ``soft_probs`` and ``logits`` keep their autograd history; ``hard_index``
    and ``t_star`` are plain integer tensors.
    """
    logits: torch.Tensor
    soft_probs: torch.Tensor
    hard_index: torch.Tensor
    t_star: torch.Tensor
    steps: torch.Tensor

    def hard_one_hot(self) -> torch.Tensor:
        return F.one_hot(self.hard_index, self.soft_probs.shape[-1]).to(self.soft_probs.dtype)

    def mix(self, values: torch.Tensor) -> torch.Tensor:
        """
        Straight-through read-out of a per-candidate quantity.

        ``values`` has the candidate axis first. The forward value is exactly
        the hard candidate's entry; the gradient is that of the convex
        combination weighted by ``soft_probs``.
        """
        values = values.to(device=self.soft_probs.device, dtype=self.soft_probs.dtype)
        hard = values[self.hard_index]
        soft = torch.tensordot(self.soft_probs, values, dims=([-1], [0]))
        return hard + (soft - soft.detach())


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class TimeStepSelector(nn.Module):
    """Conv -> residual blocks -> global pooling -> MLP, one logit per candidate."""

    def __init__(self, num_candidates: int, config: SelectorConfig):
        super().__init__()
        self.num_candidates = num_candidates
        self.config = config
        channels = config.conv_channels
        self.shallow = nn.Sequential(nn.Conv2d(3, channels, 3, padding=1), nn.SiLU())
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(config.n_resblocks)])
        self.mlp = nn.Sequential(
            nn.Linear(channels, config.mlp_hidden),
            nn.SiLU(),
            nn.Linear(config.mlp_hidden, num_candidates),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        features = self.blocks(self.shallow(image * 2.0 - 1.0))
        pooled = F.adaptive_avg_pool2d(features, 1).flatten(1)
        return self.mlp(pooled)


def build_selector(candidates: CandidateSet, config: SelectorConfig, seed: int) -> TimeStepSelector:
    with seeded(seed):
        return TimeStepSelector(len(candidates), config)


def extract_features(selector: TimeStepSelector, image: torch.Tensor) -> torch.Tensor:
    """Score every candidate for each image: ``(B, 3, H, W) -> (B, |S|)`` logits."""
    check_image_batch(image)
    height, width = image.shape[-2:]
    if min(height, width) < MIN_INPUT_SIZE:
        raise ShapeMismatchError(
            f"selector needs images of at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {height}x{width}"
        )
    return selector(image)


def gumbel_softmax_select(logits: torch.Tensor, candidates: CandidateSet, temperature: float,
                          noise_enabled: bool, generator: Optional[torch.Generator] = None) -> GumbelSelection:
    """
    Draw a candidate with the Gumbel-Softmax trick.

    soft_probs = softmax((logits + g) / temperature) with g = -log(-log(u)),
    u ~ U(0, 1) when ``noise_enabled`` and g = 0 otherwise. The candidate axis
    is the last one; leading axes are kept.
    """
    if not torch.isfinite(logits).all():
        raise NumericError("selector produced non-finite logits")
    if not (temperature > 0 and math.isfinite(temperature)):
        raise InvalidRangeError(f"temperature must be > 0, got {temperature}")
    if logits.shape[-1] != len(candidates):
        raise ShapeMismatchError(f"expected {len(candidates)} logits per item, got {logits.shape[-1]}")

    perturbed = logits
    if noise_enabled:
        uniform = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
        uniform = uniform.clamp_min(torch.finfo(logits.dtype).tiny)
        perturbed = logits - torch.log(-torch.log(uniform))

    soft_probs = torch.softmax(perturbed / temperature, dim=-1)
    hard_index = soft_probs.detach().argmax(dim=-1)
    steps = candidates.as_tensor(device=logits.device)
    return GumbelSelection(logits=logits, soft_probs=soft_probs, hard_index=hard_index,
                           t_star=steps[hard_index], steps=steps)


def fixed_selection(timestep: int, batch_size: int, dtype=torch.float32, device=None) -> GumbelSelection:
    """A constant, gradient-free selection used when DTSM is switched off."""
    if not 0 <= timestep <= MAX_TIMESTEP:
        raise InvalidRangeError(f"fixed time-step {timestep} outside [0, {MAX_TIMESTEP}]")
    logits = torch.zeros(batch_size, 1, dtype=dtype, device=device)
    steps = torch.tensor([timestep], dtype=torch.long, device=device)
    hard_index = torch.zeros(batch_size, dtype=torch.long, device=device)
    return GumbelSelection(logits=logits, soft_probs=torch.ones_like(logits), hard_index=hard_index,
                           t_star=steps[hard_index], steps=steps)


def select_timestep(selector: TimeStepSelector, image: torch.Tensor, candidates: CandidateSet,
                    config: SelectorConfig, mode: SelectionMode = SelectionMode.INFER,
                    generator: Optional[torch.Generator] = None, step: int = 0) -> GumbelSelection:
    """
    Pick t* for every image in the batch.

    Inference never samples noise, so the choice is the deterministic argmax.
    """
    mode = SelectionMode(mode)
    if selector.num_candidates != len(candidates):
        raise ShapeMismatchError(
            f"selector scores {selector.num_candidates} candidates but the set has {len(candidates)}"
        )
    logits = extract_features(selector, image)
    noise = config.noise_enabled and mode is SelectionMode.TRAIN
    selection = gumbel_softmax_select(logits, candidates, config.temperature_at(step), noise, generator)
    logger.debug("Selected t* %s (mode=%s)", selection.t_star.tolist(), mode.value)
    return selection
