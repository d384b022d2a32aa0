"""
Management command to solve a cost matrix CSV with the Hungarian algorithm
"""
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from apps.localization.exceptions import CostMatrixParseError, InvalidInputError
from apps.localization.management.base import EXIT_IO, canonical_json
from apps.localization.services.matching import CostMatrix, hungarian


class Command(BaseCommand):
    help = 'Minimum-cost assignment for a headerless cost-matrix CSV; prints {pairs, total_cost} JSON'

    def add_arguments(self, parser):
        parser.add_argument('cost_csv', type=str, help='CSV file, one row per prediction')
        parser.add_argument('--out', type=str, help='JSON file to write (standard output when omitted)')

    def handle(self, *args, **options):
        path = options['cost_csv']
        try:
            cost = CostMatrix.from_csv(path)
        except (CostMatrixParseError, InvalidInputError) as e:
            raise CommandError(f"Cannot parse cost matrix: {e}", returncode=EXIT_IO)
        except OSError as e:
            raise CommandError(f"Cannot read {path}: {e}", returncode=EXIT_IO)

        payload = canonical_json(hungarian(cost).to_dict())
        out = options.get('out')
        if not out:
            self.stdout.write(payload, ending='')
            return
        try:
            Path(out).write_text(payload, encoding='utf-8')
        except OSError as e:
            raise CommandError(f"Cannot write {out}: {e}", returncode=EXIT_IO)
        self.stdout.write(self.style.SUCCESS(f"✅ Wrote assignment to {out}"))
