"""
Checkpoint directory layout:

    adapters.safetensors   low-rank factors, keyed by their path in the backbone bundle
    selector.safetensors   time-step selector weights (absent when DTSM is off)
    optimizer.pt           optimizer moments, step counter and loss history
    config.json            resolved run configuration
    schedule.json          noise schedule, candidate set, checksums and the ablation variant
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import torch
from safetensors.torch import load_file, save_file

from .backbones import BackboneBundle
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

ADAPTERS_FILE = 'adapters.safetensors'
SELECTOR_FILE = 'selector.safetensors'
OPTIMIZER_FILE = 'optimizer.pt'
CONFIG_FILE = 'config.json'
SCHEDULE_FILE = 'schedule.json'


def write_json(data: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n', encoding='utf-8', newline='\n')


def snapshot_hash(snapshot: dict) -> str:
    payload = json.dumps(snapshot, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint file: {path}")
    return json.loads(path.read_text(encoding='utf-8'))


def _tensors(state: dict) -> dict:
    return {name: tensor.detach().cpu().contiguous() for name, tensor in state.items()}


def save_checkpoint(directory, adapters: dict, selector: Optional[torch.nn.Module], training_state: dict,
                    config_snapshot: dict, schedule_info: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_file(_tensors(adapters), str(directory / ADAPTERS_FILE), metadata={'format': 'pt'})
    selector_path = directory / SELECTOR_FILE
    if selector is not None:
        save_file(_tensors(selector.state_dict()), str(selector_path), metadata={'format': 'pt'})
    elif selector_path.exists():
        selector_path.unlink()
    torch.save(training_state, directory / OPTIMIZER_FILE)
    write_json(config_snapshot, directory / CONFIG_FILE)
    write_json(dict(schedule_info, config_hash=snapshot_hash(config_snapshot)), directory / SCHEDULE_FILE)
    logger.info("Saved checkpoint at step %s to %s", training_state.get('step'), directory)
    return directory


def load_adapters(directory, bundle: BackboneBundle):
    """Copy saved low-rank factors into an already adapted bundle."""
    tensors = load_file(str(Path(directory) / ADAPTERS_FILE))
    expected = {name for name in bundle.state_dict() if '.lora_down.' in name or '.lora_up.' in name}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise ConfigError(f"adapter archive does not match the backbone (missing={missing}, unexpected={extra})",
                          key='checkpoint')
    bundle.load_state_dict(tensors, strict=False)


def load_selector(directory, selector: torch.nn.Module):
    path = Path(directory) / SELECTOR_FILE
    if not path.is_file():
        raise ConfigError(f"{path} not found; was the checkpoint trained without DTSM?", key='checkpoint')
    selector.load_state_dict(load_file(str(path)))


def has_selector(directory) -> bool:
    return (Path(directory) / SELECTOR_FILE).is_file()


def load_training_state(directory) -> dict:
    path = Path(directory) / OPTIMIZER_FILE
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint file: {path}")
    return torch.load(path, map_location='cpu', weights_only=False)


def check_base_checksum(directory, checksum: str) -> bool:
    """Warn when the checkpoint was trained against a different base backbone."""
    recorded = read_json(Path(directory) / SCHEDULE_FILE).get('base_checksum')
    if recorded != checksum:
        logger.warning("Base backbone checksum %s differs from the checkpoint's %s; adapters may not fit",
                       checksum[:12], str(recorded)[:12])
        return False
    return True
