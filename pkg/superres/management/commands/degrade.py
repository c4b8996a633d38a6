from pathlib import Path

from superres.data import build_manifest, make_synthetic_images, write_manifest, write_pairs
from superres.management.base import SuperResCommand, required

MANIFEST_NAME = 'manifest.tsv'


class Command(SuperResCommand):
    help = "Build a seeded LR/GT pair set and its manifest from a directory of ground-truth images."
    out_key = 'paths.data_dir'

    def add_command_arguments(self, parser):
        parser.add_argument('--gt-dir', default=None,
                            help="directory of ground-truth images (default: [paths] gt_dir)")
        parser.add_argument('--crop-size', type=int, default=None,
                            help="GT crop side in pixels (default: [run] crop_size)")
        parser.add_argument('--synthetic', type=int, default=0,
                            help="first write this many seeded textured images into the GT directory "
                                 "(default: %(default)s)")
        parser.add_argument('--synthetic-size', type=int, default=64,
                            help="side of the synthetic images (default: %(default)s)")

    def overrides(self, options):
        return {'paths.gt_dir': options['gt_dir'], 'run.crop_size': options['crop_size']}

    def run(self, **options):
        config = self.run_config(options)
        out_dir = Path(config.paths.data_dir)
        if options['synthetic']:
            gt_dir = Path(config.paths.gt_dir or out_dir / 'source')
            make_synthetic_images(gt_dir, options['synthetic'], size=options['synthetic_size'], seed=config.seed)
        else:
            gt_dir = Path(required(config.paths.gt_dir, '--gt-dir', 'paths.gt_dir'))

        manifest = build_manifest(gt_dir, config.crop_size, config.degradation, config.seed)
        names = write_pairs(manifest, config.degradation, out_dir)
        write_manifest(manifest, out_dir / MANIFEST_NAME)
        if manifest.compression == 'quantize':
            self.warn("JPEG codec unavailable; compression stage fell back to 8-bit quantization")
        self.success(f"Wrote {len(names)} pairs and {out_dir / MANIFEST_NAME} "
                     f"(config_hash={manifest.config_hash[:12]})")
