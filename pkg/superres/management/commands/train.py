from pathlib import Path

from superres.data import read_manifest
from superres.management.base import SuperResCommand
from superres.management.commands.degrade import MANIFEST_NAME
from superres.trainer import AblationSpec, run_training


class Command(SuperResCommand):
    help = "Jointly train the time-step selector and the backbone adapters on a degraded pair set."

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', default=None,
                            help="dataset manifest (default: [paths] manifest, else <data_dir>/manifest.tsv)")
        parser.add_argument('--resume', default=None,
                            help="checkpoint directory to continue from (default: start fresh)")
        parser.add_argument('--steps', type=int, default=None,
                            help="total optimizer steps, overrides [run] steps (default: from config)")
        parser.add_argument('--lr', type=float, default=None,
                            help="learning rate, overrides [run] lr (default: from config)")
        parser.add_argument('--batch-size', type=int, default=None,
                            help="batch size, overrides [run] batch_size (default: from config)")

    def overrides(self, options):
        return {'paths.manifest': options['manifest'], 'run.steps': options['steps'],
                'run.lr': options['lr'], 'run.batch_size': options['batch_size']}

    def run(self, **options):
        config = self.run_config(options)
        manifest_path = Path(config.paths.manifest or Path(config.paths.data_dir) / MANIFEST_NAME)
        if not manifest_path.is_file():
            raise FileNotFoundError(f"manifest not found: {manifest_path}")
        manifest = read_manifest(manifest_path)
        checkpoint = run_training(config, AblationSpec(), manifest, out_dir=config.paths.out_dir,
                                  resume=options['resume'], device=self.device)
        self.success(f"Trained {config.steps} steps; final checkpoint in {checkpoint}")
