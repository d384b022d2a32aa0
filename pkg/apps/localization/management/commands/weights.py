"""
Management command to dump the weighting-function knot table as CSV (columns n, w)
"""
from pathlib import Path

from django.core.management.base import CommandError

from apps.localization.exceptions import ConfigurationError
from apps.localization.management.base import EXIT_CONFIG, LocalizationCommand
from apps.localization.services.weighting import build_spec, dump_knots


class Command(LocalizationCommand):
    help = 'Write the knot table W(0..N) as CSV with 17 significant digits'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--out',
            type=str,
            help='CSV file to write (standard output when omitted)',
        )

    def handle(self, *args, **options):
        run_config = self.load_config(options)
        weighting = run_config.weighting
        try:
            spec = build_spec(weighting.a, weighting.c, weighting.n_bins)
        except ConfigurationError as e:
            raise CommandError(f"Configuration error: {e}", returncode=EXIT_CONFIG)

        csv_text = dump_knots(spec).to_csv(index=False, float_format='%.17g', lineterminator='\n')
        out = options.get('out')
        if not out:
            self.stdout.write(csv_text, ending='')
            return

        path = self.write_text(Path(out), csv_text)
        self.stdout.write(self.style.SUCCESS(
            f"✅ Wrote {spec.n_bins + 1} knots (a={spec.a:g}, c={spec.c:g}, N={spec.n_bins}) to {path}"
        ))
