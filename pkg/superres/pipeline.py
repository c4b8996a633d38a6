"""
One-step super-resolution pipeline and selective (LoRA-style) fine-tuning.

    I_LR -> bicubic pre-upsample -> E -> U at t* (single evaluation) -> D -> I_SR

t* comes from the DTSM selector (or a fixed step when DTSM is disabled).
The LR latent is read as the noisy sample at level t* and the U-Net output
as an epsilon prediction, converted to the clean latent with the DDPM relation.
"""
import copy
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import BackboneBundle
from .core import DiffusionSchedule, check_image_batch, seeded
from .dtsm import (
    CandidateSet,
    GumbelSelection,
    SelectionMode,
    SelectorConfig,
    TimeStepSelector,
    fixed_selection,
    select_timestep,
)
from .exceptions import (
    AdapterTargetError,
    DivisibilityError,
    InvalidRangeError,
    NumericError,
    OutOfRangeError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

ADAPTER_TARGETS = ('encoder', 'unet')


@dataclass(frozen=True)
class AdapterSpec:
    target_component: str
    rank: int = 16
    scaling: float = 1.0

    def __post_init__(self):
        if self.target_component not in ADAPTER_TARGETS:
            raise AdapterTargetError(
                f"adapters may target {ADAPTER_TARGETS} only, got '{self.target_component}'"
            )
        if self.rank < 1:
            raise InvalidRangeError(f"adapter rank must be >= 1, got {self.rank}")


@dataclass
class SRResult:
    image: torch.Tensor
    t_star: torch.Tensor
    selection: GumbelSelection
    latents: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


def pre_upsample(lr: torch.Tensor, scale_factor: int) -> torch.Tensor:
    """Bicubic resize to the target resolution, clamped back into [0, 1]."""
    if scale_factor < 1:
        raise InvalidRangeError(f"scale_factor must be >= 1, got {scale_factor}")
    check_image_batch(lr, 'lr')
    if scale_factor == 1:
        return lr
    height, width = lr.shape[-2:]
    upsampled = F.interpolate(lr, size=(height * scale_factor, width * scale_factor),
                              mode='bicubic', align_corners=False)
    return upsampled.clamp(0.0, 1.0)


def encode(bundle: BackboneBundle, image: torch.Tensor) -> torch.Tensor:
    check_image_batch(image)
    factor = bundle.latent_factor
    height, width = image.shape[-2:]
    if height % factor or width % factor:
        raise DivisibilityError(f"image {height}x{width} is not divisible by latent factor {factor}")
    latent = bundle.encoder(image)
    expected = (image.shape[0], bundle.latent_channels, height // factor, width // factor)
    if tuple(latent.shape) != expected:
        raise ShapeMismatchError(f"encoder returned {tuple(latent.shape)}, expected {expected}")
    return latent


def predict_x0(z: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    """z0 = (z_t - sqrt(1 - a) * eps) / sqrt(a), with ``a`` scalar or per-item."""
    a = torch.as_tensor(alpha_bar, dtype=z.dtype, device=z.device)
    if (a <= 0).any() or (a > 1).any():
        raise NumericError("alpha_bar must lie in (0, 1]")
    a = a.reshape(-1, *([1] * (z.dim() - 1))) if a.dim() else a
    return (z - (1.0 - a).sqrt() * eps) / a.sqrt()


def renoise(x0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    """Inverse of ``predict_x0``: z_t = sqrt(a) * x0 + sqrt(1 - a) * eps."""
    a = torch.as_tensor(alpha_bar, dtype=x0.dtype, device=x0.device)
    a = a.reshape(-1, *([1] * (x0.dim() - 1))) if a.dim() else a
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def denoise_one_step(bundle: BackboneBundle, schedule: DiffusionSchedule, z: torch.Tensor,
                     selection: GumbelSelection) -> torch.Tensor:
    steps = selection.steps
    if (steps < 0).any() or (steps >= schedule.T).any():
        raise OutOfRangeError(f"selected steps {steps.tolist()} outside schedule of length {schedule.T}")
    table = schedule.alpha_bars[steps.cpu()]
    alpha_bar = selection.mix(table).to(z.dtype)
    if (alpha_bar <= 0).any():
        raise NumericError("alpha_bar at t* must be positive")
    eps = bundle.predict_noise(z, selection, alpha_bar)
    return predict_x0(z, eps, alpha_bar)


def decode(bundle: BackboneBundle, z: torch.Tensor) -> torch.Tensor:
    if z.dim() != 4 or z.shape[1] != bundle.latent_channels:
        raise ShapeMismatchError(
            f"latent must be (B, {bundle.latent_channels}, h, w), got {tuple(z.shape)}"
        )
    image = bundle.decoder(z)
    factor = bundle.latent_factor
    expected = (z.shape[0], 3, z.shape[2] * factor, z.shape[3] * factor)
    if tuple(image.shape) != expected:
        raise ShapeMismatchError(f"decoder returned {tuple(image.shape)}, expected {expected}")
    return image.clamp(0.0, 1.0)


def super_resolve(bundle: BackboneBundle, schedule: DiffusionSchedule, candidates: CandidateSet,
                  selector: Optional[TimeStepSelector], selector_config: SelectorConfig,
                  lr: torch.Tensor, mode: Union[SelectionMode, str] = SelectionMode.INFER,
                  scale_factor: int = 4, generator: Optional[torch.Generator] = None, step: int = 0,
                  fixed_timestep: Optional[int] = None, keep_latents: bool = False) -> SRResult:
    """
    Restore a low-resolution batch with exactly one U-Net evaluation.

    With ``selector=None`` the time-step is fixed (``fixed_timestep`` or the
    largest candidate). The selector reads the LR input itself, before
    upsampling.
    """
    check_image_batch(lr, 'lr')
    upsampled = pre_upsample(lr, scale_factor)
    if selector is None:
        timestep = candidates.max_step if fixed_timestep is None else fixed_timestep
        selection = fixed_selection(timestep, lr.shape[0], dtype=lr.dtype, device=lr.device)
    else:
        selection = select_timestep(selector, lr, candidates, selector_config, mode, generator, step)
    z_lr = encode(bundle, upsampled)
    z_sr = denoise_one_step(bundle, schedule, z_lr, selection)
    image = decode(bundle, z_sr)
    return SRResult(image=image, t_star=selection.t_star, selection=selection,
                    latents=(z_lr, z_sr) if keep_latents else None)


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable rank-r correction ``up(down(x)) * scaling``."""

    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__()
        self.base = base
        weight = base.weight
        self.lora_down = nn.Linear(base.in_features, rank, bias=False, device=weight.device, dtype=weight.dtype)
        self.lora_up = nn.Linear(rank, base.out_features, bias=False, device=weight.device, dtype=weight.dtype)
        nn.init.kaiming_uniform_(self.lora_down.weight, a=5 ** 0.5)
        nn.init.zeros_(self.lora_up.weight)
        self.scaling = scaling

    def forward(self, x):
        return self.base(x) + self.lora_up(self.lora_down(x)) * self.scaling


class LoRAConv2d(nn.Module):
    """Convolutional counterpart: the down conv mirrors the base kernel, the up conv is 1x1."""

    def __init__(self, base: nn.Conv2d, rank: int, scaling: float):
        super().__init__()
        if base.groups != 1:
            raise AdapterTargetError("grouped convolutions cannot carry adapters")
        self.base = base
        weight = base.weight
        self.lora_down = nn.Conv2d(base.in_channels, rank, base.kernel_size, stride=base.stride,
                                   padding=base.padding, dilation=base.dilation, bias=False,
                                   device=weight.device, dtype=weight.dtype)
        self.lora_up = nn.Conv2d(rank, base.out_channels, 1, bias=False, device=weight.device, dtype=weight.dtype)
        nn.init.kaiming_uniform_(self.lora_down.weight, a=5 ** 0.5)
        nn.init.zeros_(self.lora_up.weight)
        self.scaling = scaling

    def forward(self, x):
        return self.base(x) + self.lora_up(self.lora_down(x)) * self.scaling


LORA_LAYERS = (LoRALinear, LoRAConv2d)


def _wrap(module: nn.Module, spec: AdapterSpec) -> Optional[nn.Module]:
    if isinstance(module, nn.Linear):
        return LoRALinear(module, spec.rank, spec.scaling)
    if isinstance(module, nn.Conv2d):
        return LoRAConv2d(module, spec.rank, spec.scaling)
    return None


def _inject(component: nn.Module, spec: AdapterSpec) -> Tuple[nn.Module, int]:
    if isinstance(component, LORA_LAYERS):
        return component, 0
    root = _wrap(component, spec)
    if root is not None:
        return root, 1
    replaced = 0
    adapted_prefixes = []
    for name, module in list(component.named_modules()):
        # layers already carrying a correction, and their internals, stay as they are
        if any(name.startswith(prefix) for prefix in adapted_prefixes):
            continue
        if isinstance(module, LORA_LAYERS):
            adapted_prefixes.append(name + '.')
            continue
        wrapper = _wrap(module, spec)
        if wrapper is None:
            continue
        parent_name, _, attr = name.rpartition('.')
        parent = component.get_submodule(parent_name) if parent_name else component
        setattr(parent, attr, wrapper)
        replaced += 1
    return component, replaced


def apply_adapters(bundle: BackboneBundle, specs: Iterable[AdapterSpec],
                   seed: Optional[int] = None) -> BackboneBundle:
    """
    Return a copy of ``bundle`` with low-rank corrections on the targeted components.

    Every base parameter, and the whole decoder, is frozen. Corrections start
    at zero, so the adapted bundle reproduces the base outputs exactly.
    """
    specs = list(specs)
    for spec in specs:
        if spec.target_component not in ADAPTER_TARGETS:
            raise AdapterTargetError(f"adapters cannot target '{spec.target_component}'")
    adapted = copy.deepcopy(bundle)
    adapted.requires_grad_(False)
    for module in adapted.modules():
        if isinstance(module, LORA_LAYERS):
            module.lora_down.requires_grad_(True)
            module.lora_up.requires_grad_(True)
    adapted.unet_calls = 0
    with seeded(0 if seed is None else seed):
        for spec in specs:
            component, replaced = _inject(getattr(adapted, spec.target_component), spec)
            setattr(adapted, spec.target_component, component)
            logger.info("Attached rank-%d adapters to %d layers of the %s",
                        spec.rank, replaced, spec.target_component)
    return adapted


def default_adapter_specs(rank: int = 16, scaling: float = 1.0) -> List[AdapterSpec]:
    return [AdapterSpec(target, rank=rank, scaling=scaling) for target in ADAPTER_TARGETS]


def trainable_parameters(*modules: Optional[nn.Module]) -> List[nn.Parameter]:
    params = []
    for module in modules:
        if module is not None:
            params.extend(p for p in module.parameters() if p.requires_grad)
    return params


def adapter_state_dict(bundle: BackboneBundle) -> dict:
    return {name: tensor.detach().clone() for name, tensor in bundle.state_dict().items()
            if '.lora_down.' in name or '.lora_up.' in name}


def frozen_state_dict(module: nn.Module) -> dict:
    """Parameters with ``requires_grad=False`` plus buffers: everything training must leave alone."""
    trainable = {name for name, p in module.named_parameters() if p.requires_grad}
    return {name: tensor for name, tensor in module.state_dict().items() if name not in trainable}
