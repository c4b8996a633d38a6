"""
Pixel and perceptual loss terms and the weighted training objective.

    total = w_mse * mse + w_perceptual * perceptual + w_td_pal * td_pal + w_id_sal * id_sal
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import check_same_shape, seeded
from .exceptions import InvalidRangeError, NonFiniteLossError

logger = logging.getLogger(__name__)

TERM_NAMES = ('mse', 'perceptual', 'td_pal', 'id_sal')
LOSS_CSV_FIELDS = ('step',) + TERM_NAMES + ('total',)
EXTRACTOR_KINDS = ('toy', 'identity')


@dataclass(frozen=True)
class LossWeights:
    mse: float = 2.0
    perceptual: float = 5.0
    td_pal: float = 1.0
    id_sal: float = 0.5

    def __post_init__(self):
        for name in TERM_NAMES:
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidRangeError(f"loss weight '{name}' must be finite and >= 0, got {value}")

    def as_tuple(self):
        return tuple(getattr(self, name) for name in TERM_NAMES)


@dataclass
class LossTerms:
    """The four un-weighted terms of one step, tensors or plain floats."""
    mse: Union[torch.Tensor, float]
    perceptual: Union[torch.Tensor, float]
    td_pal: Union[torch.Tensor, float]
    id_sal: Union[torch.Tensor, float]

    def values(self):
        return tuple(getattr(self, name) for name in TERM_NAMES)


@dataclass(frozen=True)
class LossReport:
    mse: float
    perceptual: float
    td_pal: float
    id_sal: float
    total: float

    def as_dict(self):
        return asdict(self)

    def as_row(self, step: int) -> list:
        return [step] + [repr(float(getattr(self, name))) for name in TERM_NAMES + ('total',)]

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def mse_loss(sr: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    check_same_shape(sr, gt, 'sr and gt')
    return F.mse_loss(sr, gt)


def unit_normalize(features: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Scale every spatial feature vector to unit length along the channel axis."""
    return features * torch.rsqrt(features.pow(2).sum(dim=1, keepdim=True) + eps)


class ToyPerceptualExtractor(nn.Module):
    """Two seeded random conv layers, frozen; stands in for a pretrained perceptual network."""

    def __init__(self, seed: int = 0, channels: Sequence[int] = (8, 16)):
        super().__init__()
        with seeded(seed):
            self.layer1 = nn.Sequential(nn.Conv2d(3, channels[0], 3, padding=1), nn.ReLU())
            self.layer2 = nn.Sequential(nn.Conv2d(channels[0], channels[1], 3, stride=2, padding=1), nn.ReLU())
        self.layer_weights = (0.5, 0.5)
        self.requires_grad_(False)
        self.eval()

    def features(self, image: torch.Tensor) -> List[torch.Tensor]:
        first = self.layer1(image * 2.0 - 1.0)
        return [first, self.layer2(first)]


class IdentityExtractor(nn.Module):
    """Single layer that is the image itself."""

    layer_weights = (1.0,)

    def features(self, image: torch.Tensor) -> List[torch.Tensor]:
        return [image]


def build_extractor(kind: str = 'toy', seed: int = 0) -> nn.Module:
    if kind == 'identity':
        return IdentityExtractor()
    if kind == 'toy':
        return ToyPerceptualExtractor(seed=seed)
    raise InvalidRangeError(f"unknown perceptual extractor '{kind}', expected one of {EXTRACTOR_KINDS}")


def perceptual_distance(sr: torch.Tensor, gt: torch.Tensor, extractor) -> torch.Tensor:
    """
    Weighted sum over layers of the mean squared difference between
    channel-normalized activations.
    """
    check_same_shape(sr, gt, 'sr and gt')
    sr_features = extractor.features(sr)
    gt_features = extractor.features(gt)
    distance = sr.new_zeros(())
    for weight, a, b in zip(extractor.layer_weights, sr_features, gt_features):
        distance = distance + weight * (unit_normalize(a) - unit_normalize(b)).pow(2).mean()
    return distance


def weighted_total(terms: LossTerms, weights: LossWeights):
    total = 0.0
    for weight, term in zip(weights.as_tuple(), terms.values()):
        total = total + weight * term
    return total


def total_loss(terms: LossTerms, weights: LossWeights) -> LossReport:
    values = [float(term) for term in terms.values()]
    total = sum(weight * value for weight, value in zip(weights.as_tuple(), values))
    report = LossReport(*values, total=total)
    if not report.is_finite():
        raise NonFiniteLossError(f"non-finite loss term: {report.as_dict()}", report=report)
    return report
