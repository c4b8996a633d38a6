import csv
import logging
from pathlib import Path

import torch

from superres.backbones import state_checksum
from superres.checkpoints import (
    CONFIG_FILE,
    SCHEDULE_FILE,
    check_base_checksum,
    has_selector,
    load_adapters,
    load_selector,
    read_json,
)
from superres.config import load_run_config, run_config_from_snapshot
from superres.core import make_generator
from superres.data import list_images, load_image, save_image
from superres.dtsm import SelectionMode
from superres.exceptions import EmptyDatasetError
from superres.management.base import SuperResCommand
from superres.pipeline import frozen_state_dict, super_resolve
from superres.trainer import GUMBEL_STREAM, build_models, stream_seed

logger = logging.getLogger(__name__)

TIMESTEPS_FILE = 'timesteps.csv'


class Command(SuperResCommand):
    help = "Super-resolve every image in a directory with a trained checkpoint, one U-Net call per image."
    config_from_checkpoint = True
    seed_help = "seed for the selector's Gumbel generator (default: the checkpoint's [run] seed)"

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help="checkpoint directory written by train")
        parser.add_argument('--lr-dir', required=True, help="directory of low-resolution inputs")

    def run(self, **options):
        checkpoint = Path(options['checkpoint'])
        if not checkpoint.is_dir():
            raise FileNotFoundError(f"checkpoint directory not found: {checkpoint}")
        # The frozen base weights are rebuilt from the training seed, so --seed
        # only reseeds the selector generator.
        overrides = {self.out_key: options['out']}
        if options['config']:
            config = load_run_config(options['config'], overrides)
        else:
            config = run_config_from_snapshot(read_json(checkpoint / CONFIG_FILE), overrides)
        seed = config.seed if options['seed'] is None else options['seed']
        variant = read_json(checkpoint / SCHEDULE_FILE).get('variant', {})
        fixed_timestep = variant.get('fixed_timestep')
        if fixed_timestep is None:
            fixed_timestep = config.fixed_timestep

        bundle, selector = build_models(config, enable_dtsm=has_selector(checkpoint))
        check_base_checksum(checkpoint, state_checksum(frozen_state_dict(bundle)))
        load_adapters(checkpoint, bundle)
        if selector is not None:
            load_selector(checkpoint, selector)
        device = torch.device(self.device)
        bundle.to(device).eval()
        if selector is not None:
            selector.to(device).eval()

        inputs = list_images(options['lr_dir'])
        if not inputs:
            raise EmptyDatasetError(f"no images found in {options['lr_dir']}")
        out_dir = Path(config.paths.out_dir)
        generator = make_generator(stream_seed(seed, GUMBEL_STREAM))
        schedule = config.schedule()
        rows = []
        with torch.no_grad():
            for path in inputs:
                result = super_resolve(bundle, schedule, config.candidate_set, selector, config.selector,
                                       load_image(path).to(device), mode=SelectionMode.INFER,
                                       scale_factor=config.scale_factor, generator=generator,
                                       fixed_timestep=fixed_timestep)
                name = path.stem + '.png'
                save_image(result.image, out_dir / name)
                t_star = int(result.t_star[0])
                logger.info("%s: t*=%d", name, t_star)
                rows.append((name, t_star))

        with open(out_dir / TIMESTEPS_FILE, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(('image_id', 't_star'))
            writer.writerows(rows)
        self.success(f"Wrote {len(rows)} SR images and {out_dir / TIMESTEPS_FILE}")
