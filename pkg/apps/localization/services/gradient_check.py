"""
Gradient Check Service - Verifies every analytic gradient against central differences
Covers FGL, DDF (both KL directions) and the target gating layer at seeded random points
"""
import logging
import time
from typing import Dict, Optional

import numpy as np
from django.conf import settings

from apps.localization.exceptions import ConfigurationError, LocalizationError
from apps.localization.services.gating import GateParams, gate_backward, gate_forward
from apps.localization.services.losses import (
    build_ddf_weights,
    build_fgl_targets,
    ddf_loss,
    fgl_loss,
    finite_difference_check,
)
from apps.localization.services.refinement import EdgeDistributions
from apps.localization.services.run_config import RunConfig
from apps.localization.services.weighting import build_spec

logger = logging.getLogger(__name__)

MIN_EPSILON = 1e-7
MAX_EPSILON = 1e-3


def _random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    centers = rng.uniform(20.0, 80.0, size=(count, 2))
    sizes = rng.uniform(5.0, 30.0, size=(count, 2))
    return np.concatenate([centers, sizes], axis=1)


class GradientCheckService:
    """Finite-difference audit of the loss and gate gradients"""

    def __init__(
        self,
        run_config: Optional[RunConfig] = None,
        epsilon: Optional[float] = None,
        tolerance: Optional[float] = None,
        trials: Optional[int] = None,
    ):
        self.run_config = run_config or RunConfig()
        self.epsilon = settings.GRADCHECK_EPSILON if epsilon is None else float(epsilon)
        self.tolerance = settings.GRADCHECK_TOLERANCE if tolerance is None else float(tolerance)
        self.trials = settings.GRADCHECK_TRIALS if trials is None else int(trials)
        if not MIN_EPSILON <= self.epsilon <= MAX_EPSILON:
            raise ConfigurationError(
                f"epsilon must lie in [{MIN_EPSILON:g}, {MAX_EPSILON:g}], got {self.epsilon:g}"
            )
        if self.trials < 1:
            raise ConfigurationError(f"trials must be >= 1, got {self.trials}")
        self.seed = self.run_config.train.seed
        self.results = {
            'overall_status': 'passed',
            'checks': [],
            'epsilon': self.epsilon,
            'tolerance': self.tolerance,
        }

    def run_all_checks(self) -> Dict:
        """Run all gradient checks and return results"""
        logger.info(f"🔍 Starting gradient checks (epsilon={self.epsilon:g}, trials={self.trials})...")
        overall_start = time.time()

        check_methods = [
            self.check_fgl,
            self.check_ddf_teacher_student,
            self.check_ddf_student_teacher,
            self.check_gate,
        ]
        for check_fn in check_methods:
            check_start = time.time()
            check_fn()
            self.results['checks'][-1]['response_time_ms'] = round((time.time() - check_start) * 1000, 2)

        failed = [c for c in self.results['checks'] if c['status'] == 'failed']
        self.results['overall_status'] = 'failed' if failed else 'passed'
        self.results['passed'] = len(self.results['checks']) - len(failed)
        self.results['failed'] = len(failed)
        self.results['total_time_ms'] = round((time.time() - overall_start) * 1000, 2)

        self._log_results()
        return self.results

    def _run_check(self, name: str, icon: str, offset: int, make_instance) -> None:
        check = {
            'name': name,
            'status': 'passed',
            'max_error': 0.0,
            'trials': self.trials,
            'message': '',
            'icon': icon,
        }
        rng = np.random.default_rng([self.seed, offset])
        try:
            for _ in range(self.trials):
                loss_fn, point = make_instance(rng)
                error = finite_difference_check(loss_fn, point, self.epsilon)
                check['max_error'] = max(check['max_error'], error)
            if check['max_error'] < self.tolerance:
                check['message'] = f"max relative error {check['max_error']:.3e} < {self.tolerance:g}"
                logger.info(f"✅ {name} gradient check passed - {check['message']}")
            else:
                check['status'] = 'failed'
                check['message'] = f"max relative error {check['max_error']:.3e} >= {self.tolerance:g}"
                logger.error(f"❌ {name} gradient check failed - {check['message']}")
        except LocalizationError as e:
            check['status'] = 'failed'
            check['message'] = f"{name} raised {type(e).__name__}: {e}"
            logger.error(f"❌ {check['message']}")

        self.results['checks'].append(check)

    def check_fgl(self):
        """FGL over one or two layers at random logits and targets"""
        weighting = self.run_config.weighting
        spec = build_spec(weighting.a, weighting.c, weighting.n_bins)

        def make_instance(rng):
            k = int(rng.integers(1, 4))
            layers = int(rng.integers(1, 3))
            reference = _random_boxes(rng, k)
            targets = [
                build_fgl_targets(reference, _random_boxes(rng, k), rng.uniform(0.0, 1.0, size=k), spec)
                for _ in range(layers)
            ]
            shape = (layers, k, 4, spec.n_bins + 1)

            def loss_fn(x):
                result = fgl_loss([EdgeDistributions(x[i]) for i in range(layers)], targets, spec)
                return result.value, np.stack(result.grads)

            return loss_fn, rng.normal(0.0, 2.0, size=shape)

        self._run_check('FGL', '📐', 1, make_instance)

    def _ddf_instance(self, direction: str):
        n_bins = self.run_config.weighting.n_bins
        temperature = self.run_config.temperature

        def make_instance(rng):
            k = int(rng.integers(1, 5))
            order = rng.permutation(k)
            k_matched = int(rng.integers(0, k + 1))
            matched, unmatched = order[:k_matched], order[k_matched:]
            weights = build_ddf_weights(
                rng.uniform(0.0, 1.0, size=matched.size),
                rng.uniform(0.0, 1.0, size=unmatched.size),
                temperature,
            )
            teacher = EdgeDistributions(rng.normal(0.0, 2.0, size=(k, 4, n_bins + 1)))

            def loss_fn(x):
                result = ddf_loss(
                    [EdgeDistributions(x)], teacher, weights, matched, unmatched, direction=direction,
                )
                return result.value, result.grads[0]

            return loss_fn, rng.normal(0.0, 2.0, size=teacher.logits.shape)

        return make_instance

    def check_ddf_teacher_student(self):
        """DDF with KL(teacher || student)"""
        self._run_check('DDF teacher->student', '🎓', 2, self._ddf_instance('teacher_student'))

    def check_ddf_student_teacher(self):
        """DDF with KL(student || teacher)"""
        self._run_check('DDF student->teacher', '🔁', 3, self._ddf_instance('student_teacher'))

    def check_gate(self):
        """Gate gradients w.r.t. both inputs, weight and bias, packed into one vector"""

        def make_instance(rng):
            dim = int(rng.integers(1, 17))
            upstream = rng.normal(size=dim)

            def unpack(theta):
                x1, x2 = theta[:dim], theta[dim:2 * dim]
                weight = theta[2 * dim:6 * dim].reshape(2, 2 * dim)
                return x1, x2, GateParams(weight=weight, bias=theta[6 * dim:])

            def loss_fn(theta):
                x1, x2, params = unpack(theta)
                grads = gate_backward(x1, x2, params, upstream)
                value = float(np.dot(upstream, gate_forward(x1, x2, params)))
                return value, np.concatenate([grads.x1, grads.x2, grads.weight.ravel(), grads.bias])

            point = np.concatenate([
                rng.normal(size=2 * dim),
                rng.normal(0.0, 0.5, size=4 * dim),
                rng.normal(size=2),
            ])
            return loss_fn, point

        self._run_check('Target gate', '🚪', 4, make_instance)

    def _log_results(self):
        """Log summary of all checks"""
        logger.info("=" * 60)
        logger.info(f"🧮 GRADIENT CHECK SUMMARY - {self.results['overall_status'].upper()}")
        logger.info("=" * 60)
        for check in self.results['checks']:
            status_icon = '✅' if check['status'] == 'passed' else '❌'
            logger.info(f"{status_icon} {check['icon']} {check['name']}: {check['message']}")
        logger.info("=" * 60)
