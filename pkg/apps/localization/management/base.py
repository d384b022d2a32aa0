"""
Shared plumbing for the localization management commands: run-config flags,
output locations and the exit-code mapping for domain errors.
"""
import json
from pathlib import Path
from typing import Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from apps.localization.exceptions import ConfigurationError
from apps.localization.services.run_config import (
    RunConfig,
    add_config_arguments,
    collect_overrides,
    load_run_config,
)

EXIT_GRADCHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + '\n'


class LocalizationCommand(BaseCommand):
    """BaseCommand with RunConfig flags; subclasses call super().add_arguments(parser)"""

    def add_arguments(self, parser):
        add_config_arguments(parser)

    def load_config(self, options) -> RunConfig:
        try:
            return load_run_config(options.get('config_path'), collect_overrides(options))
        except ConfigurationError as e:
            raise CommandError(f"Configuration error: {e}", returncode=EXIT_CONFIG)
        except OSError as e:
            raise CommandError(f"Cannot read config: {e}", returncode=EXIT_IO)

    def output_dir(self, out: Optional[str], default_name: str) -> Path:
        path = Path(out) if out else Path(settings.LOCALIZATION_OUTPUT_DIR) / default_name
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CommandError(f"Cannot create output directory {path}: {e}", returncode=EXIT_IO)
        return path

    def write_text(self, path: Path, text: str) -> Path:
        try:
            with open(path, 'w', encoding='utf-8', newline='\n') as handle:
                handle.write(text)
        except OSError as e:
            raise CommandError(f"Cannot write {path}: {e}", returncode=EXIT_IO)
        return path
