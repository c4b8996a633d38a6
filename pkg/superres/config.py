"""
Run configuration: a TOML file validated section by section, overridden by
command-line flags, and resolved into a frozen ``RunConfig``.

Precedence is flags > file > defaults. The resolved configuration can be
written back as a snapshot with the same section layout, so a checkpoint's
``config.json`` loads through the same path as a hand-written file.
"""
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Optional

from .backbones import BackboneConfig
from .core import PathsConfig, RunConfig
from .data import DegradationConfig
from .dtsm import CandidateSet, SelectorConfig
from .exceptions import ConfigError, InvalidRangeError
from .losses import LossWeights
from .owms import AttributeRegistry, ProviderConfig
from .serializers import SECTION_SERIALIZERS, VariantSerializer

logger = logging.getLogger(__name__)


def load_toml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", key='config')
    try:
        with open(path, 'rb') as handle:
            return tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}", key='config') from exc


def _first_error(errors, prefix: str):
    if isinstance(errors, dict):
        key, detail = next(iter(errors.items()))
        if key == 'non_field_errors':
            return prefix, detail
        return _first_error(detail, f"{prefix}.{key}")
    if isinstance(errors, list) and errors and isinstance(errors[0], (dict, list)):
        return _first_error(errors[0], prefix)
    return prefix, errors


def _validate(serializer_class, data, prefix: str) -> dict:
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        key, detail = _first_error(serializer.errors, prefix)
        message = detail[0] if isinstance(detail, list) and detail else detail
        raise ConfigError(f"{key}: {message}", key=key)
    return dict(serializer.validated_data)


def apply_overrides(raw: dict, overrides: Optional[Dict[str, object]]) -> dict:
    """Lay ``{'section.key': value}`` flags over the file; ``None`` means not given."""
    merged = {section: dict(values) if isinstance(values, dict) else values for section, values in raw.items()}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition('.')
        merged.setdefault(section, {})
        if not isinstance(merged[section], dict):
            raise ConfigError(f"[{section}] must be a table", key=section)
        merged[section][key] = value
    return merged


def validate_sections(raw: dict) -> dict:
    unknown = sorted(set(raw) - set(SECTION_SERIALIZERS))
    if unknown:
        raise ConfigError(f"unknown config section [{unknown[0]}]; known: {sorted(SECTION_SERIALIZERS)}",
                          key=unknown[0])
    return {name: _validate(serializer, raw.get(name, {}), name)
            for name, serializer in SECTION_SERIALIZERS.items()}


def build_run_config(sections: dict) -> RunConfig:
    from .trainer import OptimizerConfig

    run, optim, dtsm, loss = sections['run'], sections['optim'], sections['dtsm'], sections['loss']
    degrade, backbone, attributes = sections['degrade'], sections['backbone'], sections['attributes']
    section = 'run'
    try:
        section = 'dtsm'
        candidates = CandidateSet(tuple(dtsm['candidates']))
        selector = SelectorConfig(
            conv_channels=dtsm['conv_channels'], n_resblocks=dtsm['n_resblocks'], mlp_hidden=dtsm['mlp_hidden'],
            temperature=dtsm['temperature'], noise_enabled=dtsm['noise'],
            temperature_min=dtsm['temperature_min'], anneal_steps=dtsm['anneal_steps'],
        )
        section = 'loss'
        weights = LossWeights(loss['lambda1'], loss['lambda2'], loss['lambda3'], loss['lambda4'])
        provider = ProviderConfig(kind=loss['provider'], dim=loss['provider_dim'],
                                  input_resolution=loss['provider_resolution'],
                                  normalization=loss['provider_normalization'], model_name=loss['clip_model'])
        section = 'attributes'
        registry = AttributeRegistry.from_triples(attributes['triples']) if 'triples' in attributes \
            else AttributeRegistry()
        section = 'degrade'
        degradation = DegradationConfig(blur_sigma=degrade['blur_sigma'], downscale=degrade['downscale'],
                                        noise_sigma=degrade['noise_sigma'],
                                        jpeg_quality=degrade['jpeg_quality'] or None)
        section = 'backbone'
        backbone_config = BackboneConfig(**backbone)
        section = 'optim'
        optimizer = OptimizerConfig(betas=tuple(optim['betas']), eps=optim['eps'],
                                    weight_decay=optim['weight_decay'], grad_clip=optim['grad_clip'])
        section = 'run'
        return RunConfig(
            seed=run['seed'], scale_factor=run['scale_factor'], learning_rate=run['lr'],
            batch_size=run['batch_size'], steps=run['steps'], crop_size=run['crop_size'],
            log_every=run['log_every'], checkpoint_every=run['checkpoint_every'],
            schedule_T=run['schedule_T'], beta_start=run['beta_start'], beta_end=run['beta_end'],
            loss_weights=weights, candidate_set=candidates, selector=selector, degradation=degradation,
            optimizer=optimizer, backbone=backbone_config, attributes=registry, provider=provider,
            extractor=run['extractor'], fixed_timestep=run['fixed_timestep'],
            paths=PathsConfig(**sections['paths']),
        )
    except InvalidRangeError as exc:
        raise ConfigError(f"[{section}] {exc}", key=section) from exc


def load_run_config(path=None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    raw = load_toml(path) if path else {}
    config = build_run_config(validate_sections(apply_overrides(raw, overrides)))
    # Reject an invalid schedule at load time rather than on first use.
    try:
        config.schedule()
    except InvalidRangeError as exc:
        raise ConfigError(f"[run] {exc}", key='run.beta_start') from exc
    logger.debug("Loaded run config from %s", path or 'defaults')
    return config


def config_snapshot(config: RunConfig) -> dict:
    """The resolved configuration in config-file layout."""
    selector, loss, provider = config.selector, config.loss_weights, config.provider
    optimizer, degradation, paths = config.optimizer, config.degradation, config.paths
    return {
        'run': {
            'seed': config.seed, 'scale_factor': config.scale_factor, 'lr': config.learning_rate,
            'batch_size': config.batch_size, 'steps': config.steps, 'crop_size': config.crop_size,
            'log_every': config.log_every, 'checkpoint_every': config.checkpoint_every,
            'schedule_T': config.schedule_T, 'beta_start': config.beta_start, 'beta_end': config.beta_end,
            'fixed_timestep': config.fixed_timestep, 'extractor': config.extractor,
        },
        'optim': {
            'betas': list(optimizer.betas), 'eps': optimizer.eps, 'weight_decay': optimizer.weight_decay,
            'grad_clip': optimizer.grad_clip,
        },
        'dtsm': {
            'candidates': list(config.candidate_set.steps), 'temperature': selector.temperature,
            'temperature_min': selector.temperature_min, 'anneal_steps': selector.anneal_steps,
            'noise': selector.noise_enabled, 'conv_channels': selector.conv_channels,
            'n_resblocks': selector.n_resblocks, 'mlp_hidden': selector.mlp_hidden,
        },
        'loss': {
            'lambda1': loss.mse, 'lambda2': loss.perceptual, 'lambda3': loss.td_pal, 'lambda4': loss.id_sal,
            'provider': provider.kind, 'provider_dim': provider.dim,
            'provider_resolution': provider.input_resolution,
            'provider_normalization': provider.normalization, 'clip_model': provider.model_name,
        },
        'attributes': {'triples': config.attributes.as_triples()},
        'degrade': {
            'blur_sigma': degradation.blur_sigma, 'downscale': degradation.downscale,
            'noise_sigma': degradation.noise_sigma, 'jpeg_quality': degradation.jpeg_quality or 0,
        },
        'backbone': {
            'kind': config.backbone.kind, 'latent_factor': config.backbone.latent_factor,
            'latent_channels': config.backbone.latent_channels,
            'hidden_channels': config.backbone.hidden_channels,
            'time_embed_dim': config.backbone.time_embed_dim, 'adapter_rank': config.backbone.adapter_rank,
            'adapter_scaling': config.backbone.adapter_scaling,
        },
        'paths': {
            'gt_dir': paths.gt_dir, 'data_dir': paths.data_dir, 'manifest': paths.manifest,
            'out_dir': paths.out_dir, 'checkpoint': paths.checkpoint,
        },
    }


def run_config_from_snapshot(snapshot: dict,
                             overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    return build_run_config(validate_sections(apply_overrides(snapshot, overrides)))


def load_variants(path) -> List['AblationSpec']:  # noqa: F821
    """``[[variant]]`` tables from a TOML file."""
    from .trainer import AblationSpec

    raw = load_toml(path)
    extra = sorted(set(raw) - {'variant'})
    if extra:
        raise ConfigError(f"unknown key '{extra[0]}' in variants file {path}", key=extra[0])
    tables = raw.get('variant', [])
    if not isinstance(tables, list) or not tables:
        raise ConfigError(f"{path} defines no [[variant]] tables", key='variant')
    variants = []
    for index, table in enumerate(tables):
        data = _validate(VariantSerializer, table, f'variant[{index}]')
        variants.append(AblationSpec(name=data['name'], enable_dtsm=data['dtsm'], enable_id_sal=data['id_sal'],
                                     enable_td_pal=data['td_pal'], excluded_attributes=tuple(data['exclude']),
                                     fixed_timestep=data['fixed_timestep']))
    return variants
