"""
Open-world multi-modality supervision.

Two losses read a frozen image/text embedding model:

* text-domain perceptual alignment: how strongly the restored image prefers
  the positive prompt of each perceptual attribute over its negative one;
* image-domain semantic alignment: cosine distance between the embeddings of
  the restored image and the ground truth.

The embedding model sits behind ``EmbeddingProvider``. A seeded toy provider
ships for desk-scale runs and tests; ``ClipEmbeddingProvider`` wraps a
pretrained CLIP checkpoint from ``transformers``.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import check_image_batch, check_same_shape, make_generator, seeded
from .exceptions import ConfigError, InvalidRangeError, NumericError, ShapeMismatchError, ZeroNormError

logger = logging.getLogger(__name__)

DEFAULT_ATTRIBUTES = (
    ('Quality', 'Good image', 'Bad image'),
    ('Sharpness', 'Sharp image', 'Blurry image'),
    ('Edge Clarity', 'Sharp edges', 'Blurry edges'),
    ('Resolution', 'High resolution image', 'Low resolution image'),
    ('Noise', 'Noise-free image', 'Noisy image'),
    ('Clarity', 'Distinct image', 'Vague image'),
)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
PROVIDER_KINDS = ('toy', 'clip')
NORMALIZATIONS = ('clip', 'identity')


@dataclass(frozen=True)
class PerceptualAttribute:
    name: str
    positive_prompt: str
    negative_prompt: str

    def __post_init__(self):
        if not self.name or not self.positive_prompt or not self.negative_prompt:
            raise InvalidRangeError(f"attribute {self.name!r} needs a name and two non-empty prompts")
        if self.positive_prompt == self.negative_prompt:
            raise InvalidRangeError(f"attribute {self.name!r} has identical positive and negative prompts")


def _default_attribute_list():
    return tuple(PerceptualAttribute(*row) for row in DEFAULT_ATTRIBUTES)


@dataclass(frozen=True)
class AttributeRegistry:
    """Ordered, non-empty set of perceptual attributes with unique names."""
    attributes: Tuple[PerceptualAttribute, ...] = field(default_factory=_default_attribute_list)

    def __post_init__(self):
        object.__setattr__(self, 'attributes', tuple(self.attributes))
        if not self.attributes:
            raise InvalidRangeError("attribute registry must not be empty")
        names = [attribute.name for attribute in self.attributes]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise InvalidRangeError(f"duplicate attribute names: {duplicates}")

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence[str]]) -> 'AttributeRegistry':
        attributes = []
        for triple in triples:
            if len(triple) != 3:
                raise ConfigError(f"attribute entries are (name, positive, negative), got {list(triple)}",
                                  key='attributes')
            attributes.append(PerceptualAttribute(*triple))
        return cls(tuple(attributes))

    def __len__(self):
        return len(self.attributes)

    def __iter__(self):
        return iter(self.attributes)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(attribute.name for attribute in self.attributes)

    def as_triples(self):
        return [[a.name, a.positive_prompt, a.negative_prompt] for a in self.attributes]

    def exclude(self, names: Iterable[str]) -> 'AttributeRegistry':
        names = set(names)
        unknown = sorted(names - set(self.names))
        if unknown:
            raise ConfigError(f"unknown attributes {unknown}; known: {list(self.names)}",
                              key='excluded_attributes')
        kept = tuple(a for a in self.attributes if a.name not in names)
        if not kept:
            raise InvalidRangeError("excluding every attribute leaves nothing to supervise")
        return AttributeRegistry(kept)


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = 'toy'
    dim: int = 32
    input_resolution: int = 32
    normalization: str = 'clip'
    model_name: str = 'openai/clip-vit-base-patch32'

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise InvalidRangeError(f"unknown embedding provider '{self.kind}', expected one of {PROVIDER_KINDS}")
        if self.normalization not in NORMALIZATIONS:
            raise InvalidRangeError(f"normalization must be one of {NORMALIZATIONS}")
        if self.dim < 1 or self.input_resolution < 1:
            raise InvalidRangeError("provider dim and input_resolution must be >= 1")


class EmbeddingProvider(nn.Module):
    """
    Frozen joint image/text embedding model.

    Subclasses implement ``encode_image`` (on resized, normalized pixels) and
    ``encode_text``. Text embeddings are cached per prompt and dtype.
    """

    def __init__(self, dim: int, input_resolution: int, mean=CLIP_MEAN, std=CLIP_STD):
        super().__init__()
        self.dim = dim
        self.input_resolution = input_resolution
        self.register_buffer('mean', torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer('std', torch.tensor(std).view(1, 3, 1, 1), persistent=False)
        self.use_cache = True
        self._text_cache: Dict[Tuple[str, torch.dtype], torch.Tensor] = {}

    def freeze(self) -> 'EmbeddingProvider':
        self.requires_grad_(False)
        self.eval()
        return self

    def normalize(self, pixels: torch.Tensor) -> torch.Tensor:
        return (pixels - self.mean.to(pixels.dtype)) / self.std.to(pixels.dtype)

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompt: str) -> torch.Tensor:
        raise NotImplementedError

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        embedding = self.encode_image(preprocess_for_provider(image, self))
        if embedding.shape[-1] != self.dim:
            raise ShapeMismatchError(f"image embedding has dimension {embedding.shape[-1]}, expected {self.dim}")
        return embedding

    def embed_text(self, prompt: str) -> torch.Tensor:
        dtype = self.mean.dtype
        key = (prompt, dtype)
        if self.use_cache and key in self._text_cache:
            return self._text_cache[key]
        with torch.no_grad():
            embedding = self.encode_text(prompt).detach()
        if embedding.shape[-1] != self.dim:
            raise ShapeMismatchError(f"text embedding has dimension {embedding.shape[-1]}, expected {self.dim}")
        if self.use_cache:
            self._text_cache[key] = embedding
        return embedding

    def clear_text_cache(self):
        self._text_cache.clear()


class ToyEmbeddingProvider(EmbeddingProvider):
    """Seeded random conv image encoder and a hash-seeded text embedder."""

    def __init__(self, dim: int = 32, input_resolution: int = 32, seed: int = 0, normalization: str = 'clip'):
        if normalization == 'identity':
            super().__init__(dim, input_resolution, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        else:
            super().__init__(dim, input_resolution)
        with seeded(seed):
            self.encoder = nn.Sequential(
                nn.Conv2d(3, 16, 3, padding=1), nn.SiLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            )
            self.proj = nn.Linear(32, dim)
        self.freeze()

    def encode_image(self, pixels):
        pooled = F.adaptive_avg_pool2d(self.encoder(pixels), 1).flatten(1)
        return self.proj(pooled)

    def encode_text(self, prompt):
        seed = int.from_bytes(hashlib.sha256(prompt.encode('utf-8')).digest()[:8], 'big')
        vector = torch.randn(self.dim, generator=make_generator(seed), dtype=torch.float64)
        return vector.to(self.proj.weight.dtype)


class ClipEmbeddingProvider(EmbeddingProvider):
    """Pretrained CLIP through ``transformers``; weights are fetched on first use and frozen."""

    def __init__(self, model_name: str = 'openai/clip-vit-base-patch32'):
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(model_name)
        super().__init__(model.config.projection_dim, model.config.vision_config.image_size)
        self.model = model
        self.tokenizer = CLIPTokenizer.from_pretrained(model_name)
        self.model_name = model_name
        self.freeze()
        logger.info("Loaded CLIP provider %s (d=%d, %dpx)", model_name, self.dim, self.input_resolution)

    def encode_image(self, pixels):
        return self.model.get_image_features(pixel_values=pixels)

    def encode_text(self, prompt):
        tokens = self.tokenizer([prompt], padding=True, return_tensors='pt')
        tokens = {name: tensor.to(self.mean.device) for name, tensor in tokens.items()}
        return self.model.get_text_features(**tokens)[0].to(self.mean.dtype)


def build_provider(config: ProviderConfig, seed: int = 0) -> EmbeddingProvider:
    if config.kind == 'clip':
        return ClipEmbeddingProvider(config.model_name)
    return ToyEmbeddingProvider(config.dim, config.input_resolution, seed=seed,
                                normalization=config.normalization)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """<a, b> / (|a| |b|) along the last axis; leading axes broadcast."""
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not torch.is_tensor(b) else b
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatchError(f"vectors differ in dimension: {a.shape[-1]} vs {b.shape[-1]}")
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise NumericError("cosine similarity of non-finite vectors")
    norm_a = torch.linalg.vector_norm(a, dim=-1)
    norm_b = torch.linalg.vector_norm(b, dim=-1)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise ZeroNormError("cosine similarity is undefined for a zero vector")
    return (a * b).sum(dim=-1) / (norm_a * norm_b)


def pair_normalize(s_pos, s_neg) -> torch.Tensor:
    """exp(s_pos) / (exp(s_pos) + exp(s_neg)), i.e. the logistic of the difference."""
    s_pos = torch.as_tensor(s_pos, dtype=torch.float64) if not torch.is_tensor(s_pos) else s_pos
    s_neg = torch.as_tensor(s_neg, dtype=torch.float64) if not torch.is_tensor(s_neg) else s_neg
    return torch.sigmoid(s_pos - s_neg)


def preprocess_for_provider(image: torch.Tensor, provider: EmbeddingProvider) -> torch.Tensor:
    """Bilinear resize to the provider's resolution, then its channel normalization."""
    check_image_batch(image)
    size = provider.input_resolution
    if tuple(image.shape[-2:]) != (size, size):
        image = F.interpolate(image, size=(size, size), mode='bilinear', align_corners=False)
    return provider.normalize(image)


def attribute_scores(embedding: torch.Tensor, registry: AttributeRegistry,
                     provider: EmbeddingProvider) -> torch.Tensor:
    """Pair-normalized preference for each positive prompt: ``(B, d) -> (B, n)``."""
    scores = []
    for attribute in registry:
        positive = provider.embed_text(attribute.positive_prompt).to(embedding)
        negative = provider.embed_text(attribute.negative_prompt).to(embedding)
        scores.append(pair_normalize(cosine_similarity(embedding, positive), cosine_similarity(embedding, negative)))
    return torch.stack(scores, dim=-1)


def td_pal_loss(image: torch.Tensor, registry: AttributeRegistry, provider: EmbeddingProvider,
                embedding: Optional[torch.Tensor] = None) -> torch.Tensor:
    """1 - mean attribute preference, averaged over the batch. Lies in (0, 1)."""
    if embedding is None:
        embedding = provider.embed_image(image)
    return (1.0 - attribute_scores(embedding, registry, provider).mean(dim=-1)).mean()


def id_sal_loss(sr: torch.Tensor, gt: torch.Tensor, provider: EmbeddingProvider,
                sr_embedding: Optional[torch.Tensor] = None) -> torch.Tensor:
    """1 - cos(e_SR, e_GT), averaged over the batch. Lies in [0, 2]."""
    check_same_shape(sr, gt, 'sr and gt')
    if sr_embedding is None:
        sr_embedding = provider.embed_image(sr)
    with torch.no_grad():
        gt_embedding = provider.embed_image(gt)
    return (1.0 - cosine_similarity(sr_embedding, gt_embedding)).mean()


class OpenWorldSupervision:
    """Both alignment losses over one provider, sharing the SR embedding."""

    def __init__(self, provider: EmbeddingProvider, registry: AttributeRegistry):
        self.provider = provider
        self.registry = registry

    def __call__(self, sr, gt, td_pal: bool = True, id_sal: bool = True):
        zero = sr.new_zeros(())
        if not (td_pal or id_sal):
            return zero, zero
        embedding = self.provider.embed_image(sr)
        td = td_pal_loss(sr, self.registry, self.provider, embedding=embedding) if td_pal else zero
        sal = id_sal_loss(sr, gt, self.provider, sr_embedding=embedding) if id_sal else zero
        return td, sal
