"""
Shared plumbing for the super-resolution management commands.

Every command accepts ``--config``, ``--seed`` and ``--out``; flags override
the matching config keys, which override the built-in defaults. Domain and
I/O errors surface as ``CommandError`` so the process exits non-zero with a
one-line diagnostic.
"""
import logging
from typing import Dict, Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ..config import load_run_config
from ..core import RunConfig
from ..exceptions import ConfigError, SuperResError

logger = logging.getLogger(__name__)


class SuperResCommand(BaseCommand):
    # infer builds its models from the checkpoint's config.json unless --config is given
    config_from_checkpoint = False
    # config key that --out overrides
    out_key = 'paths.out_dir'
    seed_help = "global seed, overrides [run] seed (default: from config)"
    requires_system_checks = []

    def add_arguments(self, parser):
        if self.config_from_checkpoint:
            parser.add_argument('--config', default=None,
                                help="TOML run configuration (default: the checkpoint's config.json)")
        else:
            parser.add_argument('--config', default=settings.SUPERRES_CONFIG,
                                help="TOML run configuration (default: %(default)s)")
        parser.add_argument('--seed', type=int, default=None, help=self.seed_help)
        parser.add_argument('--out', default=None,
                            help=f"output directory, overrides {self.out_key} (default: from config)")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def overrides(self, options) -> Dict[str, object]:
        """Dotted config keys set by this command's own flags."""
        return {}

    def flag_overrides(self, options) -> Dict[str, object]:
        overrides = {'run.seed': options.get('seed'), self.out_key: options.get('out')}
        overrides.update(self.overrides(options))
        return overrides

    def run_config(self, options) -> RunConfig:
        return load_run_config(options.get('config'), self.flag_overrides(options))

    @property
    def device(self) -> str:
        return settings.SUPERRES_DEVICE

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except ConfigError as exc:
            key = f" [{exc.key}]" if exc.key else ''
            raise CommandError(f"configuration error{key}: {exc}") from exc
        except (SuperResError, OSError) as exc:
            logger.debug("Command failed", exc_info=True)
            raise CommandError(f"{type(exc).__name__}: {exc}") from exc

    def run(self, **options):
        raise NotImplementedError

    def success(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))

    def warn(self, message: str):
        self.stdout.write(self.style.WARNING(message))


def required(value: Optional[str], flag: str, key: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required (or set {key} in the config file)", key=key)
    return value
