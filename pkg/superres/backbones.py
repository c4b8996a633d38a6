"""
Backbone bundles: the encoder/U-Net/decoder triple the one-step pipeline runs.

Any backbone plugs in by honouring three call contracts:

    encoder(image)                    -> latent      image (B, 3, H, W) in [0, 1]
    unet(latent, selection, alpha_bar) -> noise       selection: dtsm.GumbelSelection
    decoder(latent)                   -> image       unclamped; the pipeline clamps

Two desk-scale backbones ship here. ``toy`` is a small convolutional
autoencoder with a two-level time-conditioned U-Net; ``identity`` has 1x1
identity projections and a U-Net that always predicts zero noise, for
exactness checks. Both work directly on [0, 1] pixels with no [-1, 1] shift.
"""
import hashlib
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import seeded
from .exceptions import InvalidRangeError

logger = logging.getLogger(__name__)

BACKBONE_KINDS = ('toy', 'identity')


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = 'toy'
    latent_factor: int = 4
    latent_channels: int = 4
    hidden_channels: int = 32
    time_embed_dim: int = 64
    adapter_rank: int = 16
    adapter_scaling: float = 1.0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise InvalidRangeError(f"unknown backbone '{self.kind}', expected one of {BACKBONE_KINDS}")
        factor = self.latent_factor
        if factor < 1 or factor & (factor - 1):
            raise InvalidRangeError(f"latent_factor must be a power of two, got {factor}")
        if self.latent_channels < 1 or self.hidden_channels < 1 or self.time_embed_dim < 2:
            raise InvalidRangeError("channel counts must be positive and time_embed_dim >= 2")
        if self.adapter_rank < 1:
            raise InvalidRangeError(f"adapter_rank must be >= 1, got {self.adapter_rank}")


def timestep_embedding(steps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer time-steps: ``(N,) -> (N, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = steps.to(torch.float64)[:, None] * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


class ToyEncoder(nn.Module):
    def __init__(self, latent_factor: int, latent_channels: int, hidden: int):
        super().__init__()
        layers = [nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(latent_factor))):
            layers += [nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(hidden, latent_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image):
        return self.net(image)


class ToyDecoder(nn.Module):
    def __init__(self, latent_factor: int, latent_channels: int, hidden: int):
        super().__init__()
        layers = [nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(int(math.log2(latent_factor))):
            layers += [nn.Upsample(scale_factor=2, mode='nearest'),
                       nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU()]
        self.net = nn.Sequential(*layers)
        self.conv_out = nn.Conv2d(hidden, 3, 3, padding=1)
        # Start near mid-grey so few pixels sit in the clamped (zero-gradient) range.
        nn.init.constant_(self.conv_out.bias, 0.5)

    def forward(self, latent):
        return self.conv_out(self.net(latent))


class TimeResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_channels, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.act(self.conv1(x) + self.time_proj(temb)[:, :, None, None])
        return self.skip(x) + self.conv2(h)


class ToyUNet(nn.Module):
    """
    Two-level U-Net with a sinusoidal time embedding.

    The network estimates the clean latent ``x0 = z + residual`` and returns
    the equivalent noise ``(z - sqrt(a) * x0) / sqrt(1 - a)``. The output
    convolution starts at zero, so an untrained U-Net passes ``z`` through.
    """

    def __init__(self, latent_channels: int, hidden: int, time_dim: int):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.conv_in = nn.Conv2d(latent_channels, hidden, 3, padding=1)
        self.down_block = TimeResBlock(hidden, hidden, hidden)
        self.down = nn.Conv2d(hidden, hidden, 3, stride=2, padding=1)
        self.mid_block = TimeResBlock(hidden, hidden, hidden)
        self.up_conv = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.up_block = TimeResBlock(2 * hidden, hidden, hidden)
        self.conv_out = nn.Conv2d(hidden, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z, selection, alpha_bar):
        table = timestep_embedding(selection.steps, self.time_dim)
        temb = self.time_mlp(selection.mix(table).to(z.dtype))
        skip = self.down_block(self.conv_in(z), temb)
        h = self.mid_block(self.down(skip), temb)
        h = self.up_conv(F.interpolate(h, size=skip.shape[-2:], mode='nearest'))
        h = self.up_block(torch.cat([h, skip], dim=1), temb)
        x0 = z + self.conv_out(h)
        a = alpha_bar.to(z.dtype).view(-1, 1, 1, 1)
        return (z - a.sqrt() * x0) / (1.0 - a).clamp_min(1e-12).sqrt()


class ZeroUNet(nn.Module):
    """Zero-initialised 1x1 projection: predicts no noise until trained."""

    def __init__(self, latent_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(latent_channels, latent_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, z, selection, alpha_bar):
        return self.proj(z)


def identity_projection(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    with torch.no_grad():
        conv.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
        conv.bias.zero_()
    return conv


class BackboneBundle(nn.Module):
    """Encoder, U-Net and decoder plus the latent geometry they share."""

    def __init__(self, encoder: nn.Module, unet: nn.Module, decoder: nn.Module,
                 latent_factor: int, latent_channels: int, kind: str = 'custom'):
        super().__init__()
        self.encoder = encoder
        self.unet = unet
        self.decoder = decoder
        self.latent_factor = latent_factor
        self.latent_channels = latent_channels
        self.kind = kind
        self.unet_calls = 0

    def predict_noise(self, z, selection, alpha_bar):
        self.unet_calls += 1
        return self.unet(z, selection, alpha_bar)


def build_backbone(config: BackboneConfig, seed: int) -> BackboneBundle:
    """Instantiate a desk-scale backbone deterministically from ``seed``."""
    with seeded(seed):
        if config.kind == 'identity':
            bundle = BackboneBundle(identity_projection(3), ZeroUNet(3), identity_projection(3),
                                    latent_factor=1, latent_channels=3, kind='identity')
        else:
            bundle = BackboneBundle(
                ToyEncoder(config.latent_factor, config.latent_channels, config.hidden_channels),
                ToyUNet(config.latent_channels, config.hidden_channels, config.time_embed_dim),
                ToyDecoder(config.latent_factor, config.latent_channels, config.hidden_channels),
                latent_factor=config.latent_factor,
                latent_channels=config.latent_channels,
                kind='toy',
            )
    logger.info("Built %s backbone: f=%d, latent_channels=%d, %d parameters",
                bundle.kind, bundle.latent_factor, bundle.latent_channels,
                sum(p.numel() for p in bundle.parameters()))
    return bundle


def state_checksum(state: dict) -> str:
    """SHA-256 over named tensors, in mapping order."""
    digest = hashlib.sha256()
    for name, tensor in state.items():
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def module_checksum(module: nn.Module) -> str:
    return state_checksum(module.state_dict())
