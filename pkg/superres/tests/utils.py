"""Small configurations and on-disk fixtures shared by the test modules."""
from dataclasses import replace
from pathlib import Path

from superres.backbones import BackboneConfig
from superres.core import RunConfig
from superres.data import DegradationConfig, build_manifest, make_synthetic_images
from superres.dtsm import CandidateSet, SelectorConfig
from superres.owms import ProviderConfig

TINY_CANDIDATES = CandidateSet((199, 599, 999))
TINY_SELECTOR = SelectorConfig(conv_channels=4, n_resblocks=1, mlp_hidden=8)
TINY_BACKBONE = BackboneConfig(hidden_channels=8, time_embed_dim=16, adapter_rank=4)


def tiny_config(**changes) -> RunConfig:
    config = RunConfig(
        seed=0,
        scale_factor=4,
        learning_rate=1e-3,
        batch_size=2,
        steps=4,
        crop_size=32,
        log_every=0,
        candidate_set=TINY_CANDIDATES,
        selector=TINY_SELECTOR,
        degradation=DegradationConfig(jpeg_quality=None),
        backbone=TINY_BACKBONE,
        provider=ProviderConfig(dim=16, input_resolution=16),
    )
    return replace(config, **changes)


def tiny_manifest(root, config: RunConfig, count: int = 4, size: int = 32):
    gt_dir = Path(root) / 'source'
    make_synthetic_images(gt_dir, count, size=size, seed=config.seed)
    return build_manifest(gt_dir, config.crop_size, config.degradation, config.seed)
