"""
Management command to sweep one hyperparameter family over several toy-problem seeds
"""
from django.core.management.base import CommandError

from apps.localization.exceptions import ConfigurationError
from apps.localization.management.base import EXIT_CONFIG, LocalizationCommand, canonical_json
from apps.localization.services.ablation import ABLATION_FAMILIES, run_ablation


class Command(LocalizationCommand):
    help = 'Hyperparameter ablation (a/c, bin count, temperature) on the toy problem'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--family',
            required=True,
            choices=sorted(ABLATION_FAMILIES),
            help='Hyperparameter family to sweep',
        )
        parser.add_argument(
            '--seeds',
            type=str,
            default='0,1,2,3,4',
            help='Comma-separated problem seeds',
        )
        parser.add_argument(
            '--out',
            type=str,
            help='Output directory (default: LOCALIZATION_OUTPUT_DIR/ablation)',
        )

    def handle(self, *args, **options):
        run_config = self.load_config(options)
        family = options['family']
        try:
            seeds = [int(s) for s in options['seeds'].split(',') if s.strip()]
        except ValueError:
            raise CommandError(f"--seeds must be comma-separated integers, got {options['seeds']!r}",
                               returncode=EXIT_CONFIG)
        out_dir = self.output_dir(options.get('out'), 'ablation')

        self.stdout.write(self.style.WARNING(f"🧪 Ablating '{family}' over seeds {seeds}..."))
        try:
            rows, summary = run_ablation(run_config, family, seeds)
        except ConfigurationError as e:
            raise CommandError(f"Configuration error: {e}", returncode=EXIT_CONFIG)

        self.write_text(out_dir / f"ablation_{family}.csv", rows.to_csv(index=False, lineterminator='\n'))
        self.write_text(out_dir / f"ablation_{family}.json", canonical_json(summary))

        for cell in summary['values']:
            mean = cell['mean_final_iou']
            shown = 'diverged' if mean is None else f"{mean:.4f}"
            self.stdout.write(f"   {family}={cell['value']}: final-layer IoU {shown}")
        self.stdout.write(self.style.SUCCESS(f"✅ Wrote ablation results to {out_dir}"))
