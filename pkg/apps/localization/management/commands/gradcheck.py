"""
Management command to verify the analytic gradients against central finite differences
"""
from django.core.management.base import CommandError

from apps.localization.exceptions import ConfigurationError
from apps.localization.management.base import EXIT_CONFIG, EXIT_GRADCHECK_FAILED, LocalizationCommand
from apps.localization.services.gradient_check import GradientCheckService


class Command(LocalizationCommand):
    help = 'Finite-difference check of the FGL, DDF and gate gradients (exit 0 iff all pass)'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--epsilon', type=float, help='Central-difference step (default: GRADCHECK_EPSILON)')
        parser.add_argument('--tolerance', type=float, help='Max relative error (default: GRADCHECK_TOLERANCE)')
        parser.add_argument('--trials', type=int, help='Random instances per check (default: GRADCHECK_TRIALS)')

    def handle(self, *args, **options):
        run_config = self.load_config(options)
        try:
            service = GradientCheckService(
                run_config,
                epsilon=options.get('epsilon'),
                tolerance=options.get('tolerance'),
                trials=options.get('trials'),
            )
        except ConfigurationError as e:
            raise CommandError(f"Configuration error: {e}", returncode=EXIT_CONFIG)

        self.stdout.write(self.style.WARNING('🧮 Running Gradient Checks...'))
        results = service.run_all_checks()

        self.stdout.write('=' * 70)
        for check in results['checks']:
            if check['status'] == 'passed':
                status_msg = self.style.SUCCESS('✅ PASSED')
            else:
                status_msg = self.style.ERROR('❌ FAILED')
            self.stdout.write(f"{check['icon']} {check['name']}: {status_msg}")
            self.stdout.write(f"   max relative error {check['max_error']:.3e} over {check['trials']} trials")
        self.stdout.write('=' * 70)
        self.stdout.write(
            f"Summary: {results['passed']} passed, {results['failed']} failed "
            f"(epsilon={results['epsilon']:g}, tolerance={results['tolerance']:g})"
        )

        if results['overall_status'] != 'passed':
            raise CommandError('Gradient check failed', returncode=EXIT_GRADCHECK_FAILED)
        self.stdout.write(self.style.SUCCESS('✅ ALL GRADIENTS VERIFIED'))
