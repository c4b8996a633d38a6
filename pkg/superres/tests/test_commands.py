import csv
import tempfile
from io import StringIO
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from superres.data import load_image
from superres.management.commands import ablate, degrade, eval as eval_command, infer, train

TOY_CONFIG = str(Path(settings.BASE_DIR) / 'configs' / 'toy.toml')
DJANGO_OPTIONS = {'help', 'version', 'verbosity', 'settings', 'pythonpath', 'traceback', 'no_color',
                  'force_color', 'skip_checks'}


def run(*args):
    out = StringIO()
    call_command(*args, stdout=out, stderr=StringIO())
    return out.getvalue()


class HelpTests(SimpleTestCase):
    def test_every_flag_documents_its_default(self):
        for module, name in ((degrade, 'degrade'), (train, 'train'), (infer, 'infer'),
                             (eval_command, 'eval'), (ablate, 'ablate')):
            parser = module.Command().create_parser('manage.py', name)
            text = parser.format_help()
            self.assertIn('--out', text)
            for action in parser._actions:
                if not action.option_strings or action.required or action.dest in DJANGO_OPTIONS:
                    continue
                self.assertIn('default', action.help, f"{name} {action.option_strings}")

    def test_infer_accepts_config_and_seed(self):
        parser = infer.Command().create_parser('manage.py', 'infer')
        actions = {action.dest: action for action in parser._actions}
        self.assertIsNone(actions['config'].default)
        self.assertIn("checkpoint's config.json", actions['config'].help)
        self.assertIs(actions['seed'].type, int)
        self.assertIsNone(actions['seed'].default)


class CommandPipelineTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.data = self.root / 'data'

    def tearDown(self):
        self.tmp.cleanup()

    def degrade(self):
        return run('degrade', '--config', TOY_CONFIG, '--synthetic', '3', '--out', str(self.data))

    def test_degrade_writes_pairs_and_manifest(self):
        output = self.degrade()
        self.assertIn('Wrote 3 pairs', output)
        self.assertEqual(len(list((self.data / 'lr').glob('*.png'))), 3)
        self.assertEqual(tuple(load_image(self.data / 'lr' / 'img_000.png').shape), (1, 3, 16, 16))
        manifest = (self.data / 'manifest.tsv').read_bytes()
        lr = (self.data / 'lr' / 'img_001.png').read_bytes()
        self.degrade()
        self.assertEqual((self.data / 'manifest.tsv').read_bytes(), manifest)
        self.assertEqual((self.data / 'lr' / 'img_001.png').read_bytes(), lr)

    def test_degrade_missing_directory(self):
        missing = self.root / 'no_such_dir'
        with self.assertRaises(CommandError) as ctx:
            run('degrade', '--config', TOY_CONFIG, '--gt-dir', str(missing), '--out', str(self.data))
        self.assertIn(str(missing), str(ctx.exception))

    def test_bad_config_key(self):
        config = self.root / 'bad.toml'
        config.write_text("[run]\nstepz = 1\n")
        with self.assertRaises(CommandError) as ctx:
            run('degrade', '--config', str(config), '--synthetic', '1', '--out', str(self.data))
        self.assertIn('run.stepz', str(ctx.exception))

    def test_train_infer_eval(self):
        self.degrade()
        runs = self.root / 'runs'
        output = run('train', '--config', TOY_CONFIG, '--manifest', str(self.data / 'manifest.tsv'),
                     '--steps', '2', '--out', str(runs))
        self.assertIn('Trained 2 steps', output)
        self.assertTrue((runs / 'last' / 'adapters.safetensors').is_file())
        self.assertEqual(len((runs / 'losses.csv').read_text().splitlines()), 3)

        sr_dir = self.root / 'sr'
        run('infer', '--checkpoint', str(runs / 'last'), '--lr-dir', str(self.data / 'lr'), '--out', str(sr_dir))
        self.assertEqual(tuple(load_image(sr_dir / 'img_000.png').shape), (1, 3, 64, 64))
        with open(sr_dir / 'timesteps.csv', newline='', encoding='utf-8') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(rows[0], ['image_id', 't_star'])
        self.assertEqual([row[0] for row in rows[1:]], ['img_000.png', 'img_001.png', 'img_002.png'])
        self.assertTrue(all(int(row[1]) in (199, 399, 599, 799, 999) for row in rows[1:]))
        first = (sr_dir / 'img_002.png').read_bytes()
        run('infer', '--checkpoint', str(runs / 'last'), '--lr-dir', str(self.data / 'lr'), '--out', str(sr_dir))
        self.assertEqual((sr_dir / 'img_002.png').read_bytes(), first)

        reseeded = self.root / 'sr_seeded'
        run('infer', '--checkpoint', str(runs / 'last'), '--lr-dir', str(self.data / 'lr'), '--seed', '3',
            '--out', str(reseeded))
        self.assertEqual((reseeded / 'img_002.png').read_bytes(), first)
        from_file = self.root / 'sr_config'
        run('infer', '--config', TOY_CONFIG, '--checkpoint', str(runs / 'last'), '--lr-dir', str(self.data / 'lr'),
            '--out', str(from_file))
        self.assertEqual((from_file / 'img_002.png').read_bytes(), first)
        self.assertEqual((from_file / 'timesteps.csv').read_bytes(), (sr_dir / 'timesteps.csv').read_bytes())

        metrics = self.root / 'metrics.csv'
        run('eval', '--config', TOY_CONFIG, '--sr-dir', str(sr_dir), '--gt-dir', str(self.data / 'gt'),
            '--out-csv', str(metrics))
        with open(metrics, newline='', encoding='utf-8') as handle:
            table = list(csv.reader(handle))
        self.assertEqual(table[0], ['image_id', 'psnr_y', 'ssim_y', 'perceptual'])
        self.assertEqual(table[-1][0], 'MEAN')
        self.assertEqual(len(table), 5)

    def test_train_without_manifest(self):
        with self.assertRaises(CommandError) as ctx:
            run('train', '--config', TOY_CONFIG, '--manifest', str(self.root / 'missing.tsv'))
        self.assertIn('missing.tsv', str(ctx.exception))

    def test_infer_missing_checkpoint(self):
        with self.assertRaises(CommandError):
            run('infer', '--checkpoint', str(self.root / 'nothing'), '--lr-dir', str(self.root))

    def test_eval_mismatched_directories(self):
        self.degrade()
        (self.data / 'gt' / 'img_000.png').unlink()
        with self.assertRaises(CommandError) as ctx:
            run('eval', '--config', TOY_CONFIG, '--sr-dir', str(self.data / 'lr'), '--gt-dir', str(self.data / 'gt'))
        self.assertIn('img_000.png', str(ctx.exception))

    def test_ablate_variants_file(self):
        self.degrade()
        variants = self.root / 'variants.toml'
        variants.write_text("[[variant]]\nname = \"Full\"\n[[variant]]\nname = \"Fixed\"\ndtsm = false\n")
        out = self.root / 'abl'
        output = run('ablate', '--config', TOY_CONFIG, '--variants', str(variants),
                     '--manifest', str(self.data / 'manifest.tsv'), '--steps', '1', '--out', str(out))
        self.assertIn('2 variants', output)
        with open(out / 'ablation.csv', newline='', encoding='utf-8') as handle:
            table = list(csv.reader(handle))
        self.assertEqual([row[:2] for row in table[1:]], [['Full', '✓'], ['Fixed', '×']])
