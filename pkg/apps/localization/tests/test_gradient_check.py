from django.test import SimpleTestCase, override_settings

from apps.localization.exceptions import ConfigurationError
from apps.localization.services.gradient_check import GradientCheckService
from apps.localization.services.run_config import parse_run_config


class GradientCheckServiceTests(SimpleTestCase):

    def setUp(self):
        self.config = parse_run_config({'weighting': {'n_bins': 8}, 'train': {'seed': 3}})

    def test_all_checks_pass(self):
        results = GradientCheckService(self.config, trials=2).run_all_checks()
        self.assertEqual(results['overall_status'], 'passed')
        self.assertEqual(
            [check['name'] for check in results['checks']],
            ['FGL', 'DDF teacher->student', 'DDF student->teacher', 'Target gate'],
        )
        for check in results['checks']:
            self.assertLess(check['max_error'], 1e-5)
            self.assertEqual(check['trials'], 2)

    def test_same_seed_gives_same_errors(self):
        first = GradientCheckService(self.config, trials=1).run_all_checks()
        second = GradientCheckService(self.config, trials=1).run_all_checks()
        self.assertEqual(
            [c['max_error'] for c in first['checks']], [c['max_error'] for c in second['checks']],
        )

    @override_settings(GRADCHECK_EPSILON=1e-6, GRADCHECK_TRIALS=3)
    def test_defaults_come_from_settings(self):
        service = GradientCheckService(self.config)
        self.assertEqual(service.epsilon, 1e-6)
        self.assertEqual(service.trials, 3)

    def test_tight_tolerance_fails(self):
        results = GradientCheckService(self.config, tolerance=0.0, trials=1).run_all_checks()
        self.assertEqual(results['overall_status'], 'failed')

    def test_invalid_arguments(self):
        with self.assertRaises(ConfigurationError):
            GradientCheckService(self.config, epsilon=1e-2)
        with self.assertRaises(ConfigurationError):
            GradientCheckService(self.config, trials=0)
