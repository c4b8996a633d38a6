from pathlib import Path

from superres.config import load_variants
from superres.data import read_manifest
from superres.management.base import SuperResCommand
from superres.management.commands.degrade import MANIFEST_NAME
from superres.trainer import ABLATION_PRESETS, run_ablation_suite


class Command(SuperResCommand):
    help = "Train and evaluate a set of ablation variants with the same seed and data; writes ablation.csv."

    def add_command_arguments(self, parser):
        group = parser.add_mutually_exclusive_group()
        group.add_argument('--preset', choices=sorted(ABLATION_PRESETS), default='components',
                           help="built-in variant table (default: %(default)s)")
        group.add_argument('--variants', default=None,
                           help="TOML file of [[variant]] tables, replaces --preset (default: none)")
        parser.add_argument('--manifest', default=None,
                            help="dataset manifest (default: [paths] manifest, else <data_dir>/manifest.tsv)")
        parser.add_argument('--steps', type=int, default=None,
                            help="training steps per variant, overrides [run] steps (default: from config)")

    def overrides(self, options):
        return {'paths.manifest': options['manifest'], 'run.steps': options['steps']}

    def run(self, **options):
        config = self.run_config(options)
        if options['variants']:
            variants = load_variants(options['variants'])
        else:
            variants = ABLATION_PRESETS[options['preset']](config.attributes)
        manifest_path = Path(config.paths.manifest or Path(config.paths.data_dir) / MANIFEST_NAME)
        if not manifest_path.is_file():
            raise FileNotFoundError(f"manifest not found: {manifest_path}")
        out_dir = Path(config.paths.out_dir)
        results = run_ablation_suite(config, variants, read_manifest(manifest_path), out_dir, device=self.device)
        for result in results:
            if result.status != 'ok':
                self.warn(f"{result.spec.name}: {result.status}")
        self.success(f"{len(results)} variants -> {out_dir / 'ablation.csv'}")
