from pathlib import Path

from superres.evalmetrics import evaluate_pairs, read_external_scores, write_metrics_csv
from superres.losses import build_extractor
from superres.management.base import SuperResCommand
from superres.trainer import EXTRACTOR_STREAM, stream_seed


class Command(SuperResCommand):
    help = "Score SR images against ground truth: PSNR-Y, SSIM-Y and the perceptual distance, per image and mean."

    def add_command_arguments(self, parser):
        parser.add_argument('--sr-dir', required=True, help="directory of restored images")
        parser.add_argument('--gt-dir', required=True, help="directory of ground-truth images with matching names")
        parser.add_argument('--out-csv', default=None, help="metric table (default: <out>/metrics.csv)")
        parser.add_argument('--external-scores', default=None,
                            help="CSV keyed by image_id whose other columns are merged in (default: none)")

    def run(self, **options):
        config = self.run_config(options)
        extractor = build_extractor(config.extractor, seed=stream_seed(config.seed, EXTRACTOR_STREAM))
        rows, summary = evaluate_pairs(options['sr_dir'], options['gt_dir'], extractor)
        external = read_external_scores(options['external_scores']) if options['external_scores'] else None
        out_csv = Path(options['out_csv'] or Path(config.paths.out_dir) / 'metrics.csv')
        write_metrics_csv(rows, summary, out_csv, external)
        self.success(f"{len(rows)} images: PSNR-Y {summary.psnr_y:.4f} dB, SSIM-Y {summary.ssim_y:.4f}, "
                     f"perceptual {summary.perceptual:.4f} -> {out_csv}")
