"""
Joint training of the time-step selector and the backbone adapters, and the
ablation harness built on top of it.

Every source of randomness is derived from the run seed: component weights
through fixed streams, the batch order per epoch and the Gumbel noise per
step. Nothing depends on how many steps ran in this process, so resuming
from a checkpoint reproduces an uninterrupted run bit for bit.
"""
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
from django.utils.text import slugify

from .backbones import build_backbone, module_checksum, state_checksum
from .checkpoints import (
    CONFIG_FILE,
    check_base_checksum,
    has_selector,
    load_adapters,
    load_selector,
    load_training_state,
    save_checkpoint,
    write_json,
)
from .core import RunConfig, derive_sample_seed, make_generator
from .data import DatasetManifest, PairSample, SyntheticPairDataset, degradation_hash
from .dtsm import SelectionMode, build_selector
from .evalmetrics import MetricRow, evaluate_tensors, summarize
from .exceptions import ConfigError, InvalidRangeError, SuperResError
from .losses import (
    LOSS_CSV_FIELDS,
    LossReport,
    LossTerms,
    LossWeights,
    build_extractor,
    mse_loss,
    perceptual_distance,
    total_loss,
    weighted_total,
)
from .owms import AttributeRegistry, OpenWorldSupervision, build_provider
from .pipeline import (
    SRResult,
    adapter_state_dict,
    apply_adapters,
    default_adapter_specs,
    frozen_state_dict,
    super_resolve,
    trainable_parameters,
)

logger = logging.getLogger(__name__)

# Seed streams derived from the run seed.
BACKBONE_STREAM = 0
ADAPTER_STREAM = 1
SELECTOR_STREAM = 2
PROVIDER_STREAM = 3
EXTRACTOR_STREAM = 4
GUMBEL_STREAM = 5
BATCH_STREAM = 6

ABLATION_COLUMNS = ('variant', 'dtsm', 'id_sal', 'td_pal', 'excluded_attributes',
                    'psnr_y', 'ssim_y', 'perceptual', 'final_total', 'status')
CHECK, CROSS = '✓', '×'


@dataclass(frozen=True)
class OptimizerConfig:
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'betas', tuple(float(b) for b in self.betas))
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise InvalidRangeError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise InvalidRangeError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise InvalidRangeError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidRangeError(f"grad_clip must be > 0 when set, got {self.grad_clip}")


@dataclass(frozen=True)
class AblationSpec:
    name: str = 'Full'
    enable_dtsm: bool = True
    enable_id_sal: bool = True
    enable_td_pal: bool = True
    excluded_attributes: Tuple[str, ...] = ()
    # t* used while DTSM is off; None means the largest candidate.
    fixed_timestep: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'excluded_attributes', tuple(self.excluded_attributes))
        if not self.name.strip():
            raise InvalidRangeError("ablation variants need a name")

    def effective_weights(self, weights: LossWeights) -> LossWeights:
        return replace(weights,
                       td_pal=weights.td_pal if self.enable_td_pal else 0.0,
                       id_sal=weights.id_sal if self.enable_id_sal else 0.0)

    def describe(self) -> dict:
        return {'name': self.name, 'dtsm': self.enable_dtsm, 'id_sal': self.enable_id_sal,
                'td_pal': self.enable_td_pal, 'excluded_attributes': list(self.excluded_attributes),
                'fixed_timestep': self.fixed_timestep}


def component_variants(registry: Optional[AttributeRegistry] = None) -> List[AblationSpec]:
    return [
        AblationSpec('Variant-1', enable_dtsm=False),
        AblationSpec('Variant-2', enable_id_sal=False),
        AblationSpec('Variant-3', enable_td_pal=False),
        AblationSpec('Full'),
    ]


def attribute_variants(registry: Optional[AttributeRegistry] = None) -> List[AblationSpec]:
    registry = registry or AttributeRegistry()
    variants = [AblationSpec(f'w/o {name}', excluded_attributes=(name,)) for name in registry.names]
    return variants + [AblationSpec('All')]


ABLATION_PRESETS = {
    'components': component_variants,
    'attributes': attribute_variants,
}


@dataclass
class TrainState:
    step: int = 0
    history: List[LossReport] = field(default_factory=list)


def stream_seed(seed: int, stream: int) -> int:
    return derive_sample_seed(seed, stream)


def make_optimizer(parameters, learning_rate: float, config: OptimizerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(parameters, lr=learning_rate, betas=config.betas, eps=config.eps,
                             weight_decay=config.weight_decay)


def build_models(config: RunConfig, enable_dtsm: bool = True):
    """Base backbone with zero-initialised adapters, and the selector when DTSM is on."""
    base = build_backbone(config.backbone, stream_seed(config.seed, BACKBONE_STREAM))
    specs = default_adapter_specs(config.backbone.adapter_rank, config.backbone.adapter_scaling)
    bundle = apply_adapters(base, specs, seed=stream_seed(config.seed, ADAPTER_STREAM))
    selector = None
    if enable_dtsm:
        selector = build_selector(config.candidate_set, config.selector, stream_seed(config.seed, SELECTOR_STREAM))
    return bundle, selector


def write_loss_csv(history: Sequence[LossReport], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(LOSS_CSV_FIELDS)
        for step, report in enumerate(history, start=1):
            writer.writerow(report.as_row(step))


class Trainer:
    """
    Owns the adapted backbone, the selector, the frozen supervision models
    and the optimizer. Only adapter factors and selector weights train.
    """

    def __init__(self, config: RunConfig, ablation: AblationSpec = AblationSpec(), device: str = 'cpu'):
        self.config = config
        self.ablation = ablation
        self.device = torch.device(device)
        self.schedule = config.schedule()
        self.bundle, self.selector = build_models(config, ablation.enable_dtsm)
        registry = config.attributes
        if ablation.excluded_attributes:
            registry = registry.exclude(ablation.excluded_attributes)
        self.provider = build_provider(config.provider, seed=stream_seed(config.seed, PROVIDER_STREAM))
        self.supervision = OpenWorldSupervision(self.provider, registry)
        self.extractor = build_extractor(config.extractor, seed=stream_seed(config.seed, EXTRACTOR_STREAM))
        for module in (self.bundle, self.selector, self.provider, self.extractor):
            if module is not None:
                module.to(self.device)
        self.weights = ablation.effective_weights(config.loss_weights)
        self.parameters = trainable_parameters(self.bundle, self.selector)
        self.optimizer = make_optimizer(self.parameters, config.learning_rate, config.optimizer)
        self.state = TrainState()
        self.gumbel_seed = stream_seed(config.seed, GUMBEL_STREAM)
        self.batch_seed = stream_seed(config.seed, BATCH_STREAM)
        logger.info("Trainer ready for variant '%s': %d trainable tensors (%d values), weights %s",
                    ablation.name, len(self.parameters), sum(p.numel() for p in self.parameters),
                    self.weights.as_tuple())

    @property
    def fixed_timestep(self) -> Optional[int]:
        if self.ablation.fixed_timestep is not None:
            return self.ablation.fixed_timestep
        return self.config.fixed_timestep

    def base_checksum(self) -> str:
        return state_checksum(frozen_state_dict(self.bundle))

    def decoder_checksum(self) -> str:
        return module_checksum(self.bundle.decoder)

    def provider_checksum(self) -> str:
        return module_checksum(self.provider)

    def forward(self, lr: torch.Tensor, mode=SelectionMode.TRAIN, step: int = 0) -> SRResult:
        generator = None
        if SelectionMode(mode) is SelectionMode.TRAIN:
            generator = make_generator(derive_sample_seed(self.gumbel_seed, step), device=self.device.type)
        return super_resolve(self.bundle, self.schedule, self.config.candidate_set, self.selector,
                             self.config.selector, lr.to(self.device), mode=mode,
                             scale_factor=self.config.scale_factor, generator=generator, step=step,
                             fixed_timestep=self.fixed_timestep)

    def compute_terms(self, sr: torch.Tensor, gt: torch.Tensor) -> LossTerms:
        td_pal, id_sal = self.supervision(sr, gt, td_pal=self.ablation.enable_td_pal,
                                          id_sal=self.ablation.enable_id_sal)
        return LossTerms(mse=mse_loss(sr, gt), perceptual=perceptual_distance(sr, gt, self.extractor),
                         td_pal=td_pal, id_sal=id_sal)

    def train_step(self, batch: PairSample) -> LossReport:
        step = self.state.step
        result = self.forward(batch.lr, SelectionMode.TRAIN, step)
        gt = batch.gt.to(self.device)
        terms = self.compute_terms(result.image, gt)
        report = total_loss(terms, self.weights)
        loss = weighted_total(terms, self.weights)

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.optimizer.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.parameters, self.config.optimizer.grad_clip)
        self.optimizer.step()

        self.state.step += 1
        self.state.history.append(report)
        logger.debug("step %d t*=%s total=%.6f", self.state.step, result.t_star.tolist(), report.total)
        return report

    def fit(self, dataset: SyntheticPairDataset, steps: int, out_dir=None, snapshot: Optional[dict] = None):
        log_every = self.config.log_every
        checkpoint_every = self.config.checkpoint_every
        while self.state.step < steps:
            indices = dataset.batch_indices(self.state.step, self.config.batch_size, self.batch_seed)
            report = self.train_step(dataset.batch(indices))
            step = self.state.step
            if log_every and step % log_every == 0:
                logger.info("step %d/%d total=%.5f mse=%.5f perceptual=%.5f td_pal=%.5f id_sal=%.5f",
                            step, steps, report.total, report.mse, report.perceptual,
                            report.td_pal, report.id_sal)
            if out_dir is not None and checkpoint_every and step % checkpoint_every == 0:
                self.save(Path(out_dir) / 'checkpoints' / f'step_{step:06d}', snapshot or {})
        return self.state

    def schedule_info(self) -> dict:
        info = self.schedule.describe()
        info.update({
            'candidates': list(self.config.candidate_set.steps),
            'base_checksum': self.base_checksum(),
            'decoder_checksum': self.decoder_checksum(),
            'variant': self.ablation.describe(),
        })
        return info

    def save(self, directory, snapshot: dict) -> Path:
        training_state = {
            'step': self.state.step,
            'optimizer': self.optimizer.state_dict(),
            'history': [report.as_dict() for report in self.state.history],
        }
        return save_checkpoint(directory, adapter_state_dict(self.bundle), self.selector, training_state,
                               snapshot, self.schedule_info())

    def restore(self, directory):
        """Load weights, optimizer moments and history to continue a run."""
        check_base_checksum(directory, self.base_checksum())
        load_adapters(directory, self.bundle)
        if self.selector is not None:
            load_selector(directory, self.selector)
        elif has_selector(directory):
            raise ConfigError(f"{directory} was trained with DTSM but this variant disables it", key='checkpoint')
        state = load_training_state(directory)
        self.optimizer.load_state_dict(state['optimizer'])
        self.state = TrainState(step=state['step'], history=[LossReport(**row) for row in state['history']])
        logger.info("Resumed from %s at step %d", directory, self.state.step)

    @torch.no_grad()
    def evaluate(self, dataset: SyntheticPairDataset) -> Tuple[List[MetricRow], MetricRow]:
        rows = []
        for index, entry in enumerate(dataset.manifest.entries):
            lr, gt = dataset[index]
            result = self.forward(lr.unsqueeze(0), SelectionMode.INFER)
            rows.extend(evaluate_tensors(result.image, gt.unsqueeze(0).to(self.device),
                                         [Path(entry.gt_path).name], self.extractor))
        return rows, summarize(rows)


def _check_compatible(config: RunConfig, manifest: DatasetManifest):
    if config.scale_factor != config.degradation.downscale:
        raise ConfigError(f"scale_factor {config.scale_factor} must equal degrade.downscale "
                          f"{config.degradation.downscale}", key='run.scale_factor')
    if manifest.config_hash != degradation_hash(config.degradation, manifest.crop_size, config.seed):
        logger.warning("Manifest config_hash %s was built from different degradation settings or seed",
                       manifest.config_hash[:12])


def train(config: RunConfig, ablation: AblationSpec, dataset: SyntheticPairDataset, out_dir,
          resume=None, device: str = 'cpu') -> Trainer:
    from .config import config_snapshot

    _check_compatible(config, dataset.manifest)
    out_dir = Path(out_dir)
    snapshot = config_snapshot(config)
    trainer = Trainer(config, ablation, device=device)
    if resume is not None:
        trainer.restore(resume)
    trainer.fit(dataset, config.steps, out_dir=out_dir, snapshot=snapshot)
    write_loss_csv(trainer.state.history, out_dir / 'losses.csv')
    write_json(snapshot, out_dir / CONFIG_FILE)
    trainer.save(out_dir / 'last', snapshot)
    return trainer


def run_training(config: RunConfig, ablation: AblationSpec, manifest: DatasetManifest, out_dir=None,
                 resume=None, device: str = 'cpu') -> Path:
    """Train one variant; returns the final checkpoint directory."""
    dataset = SyntheticPairDataset(manifest, config.degradation)
    out_dir = Path(out_dir or config.paths.out_dir)
    train(config, ablation, dataset, out_dir, resume=resume, device=device)
    return out_dir / 'last'


@dataclass(frozen=True)
class AblationResult:
    spec: AblationSpec
    psnr_y: float = math.nan
    ssim_y: float = math.nan
    perceptual: float = math.nan
    final_total: float = math.nan
    status: str = 'ok'

    def as_row(self) -> list:
        def number(value):
            return '' if math.isnan(value) else repr(float(value))

        spec = self.spec
        return [spec.name,
                CHECK if spec.enable_dtsm else CROSS,
                CHECK if spec.enable_id_sal else CROSS,
                CHECK if spec.enable_td_pal else CROSS,
                ';'.join(spec.excluded_attributes),
                number(self.psnr_y), number(self.ssim_y), number(self.perceptual), number(self.final_total),
                self.status]


def write_ablation_csv(results: Sequence[AblationResult], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(ABLATION_COLUMNS)
        for result in results:
            writer.writerow(result.as_row())


def run_ablation_suite(config: RunConfig, variants: Sequence[AblationSpec], manifest: DatasetManifest,
                       out_dir=None, device: str = 'cpu') -> List[AblationResult]:
    """
    Train and evaluate every variant with the same seed and data. A failing
    variant is recorded with its error and the suite carries on.
    """
    variants = list(variants)
    if not variants:
        raise InvalidRangeError("an ablation suite needs at least one variant")
    names = [spec.name for spec in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"variant names must be unique, got {names}", key='variant.name')
    out_dir = Path(out_dir or config.paths.out_dir)
    dataset = SyntheticPairDataset(manifest, config.degradation)
    results = []
    for spec in variants:
        logger.info("Ablation variant '%s'", spec.name)
        try:
            trainer = train(config, spec, dataset, out_dir / (slugify(spec.name) or 'variant'), device=device)
            _, summary = trainer.evaluate(dataset)
            final_total = trainer.state.history[-1].total if trainer.state.history else math.nan
            results.append(AblationResult(spec, summary.psnr_y, summary.ssim_y, summary.perceptual, final_total))
        except (SuperResError, OSError, RuntimeError) as exc:
            logger.exception("Variant '%s' failed", spec.name)
            results.append(AblationResult(spec, status=f'failed: {type(exc).__name__}: {exc}'))
    write_ablation_csv(results, out_dir / 'ablation.csv')
    return results
