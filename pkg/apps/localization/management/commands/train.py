"""
Management command to run the toy trainer and write metrics.csv, summary.json and config.json
"""
import logging

from django.core.management.base import CommandError

from apps.localization.exceptions import ConfigurationError, DivergenceError
from apps.localization.management.base import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    LocalizationCommand,
    canonical_json,
)
from apps.localization.models import TrainingRun
from apps.localization.services.toytrain import generate_problem, train

logger = logging.getLogger(__name__)


class Command(LocalizationCommand):
    help = 'Train the toy refinement problem and write per-step metrics plus a JSON summary'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--out',
            type=str,
            help='Output directory (default: LOCALIZATION_OUTPUT_DIR/train_seed<seed>)',
        )
        parser.add_argument(
            '--record',
            action='store_true',
            help='Store the run as a TrainingRun row',
        )

    def handle(self, *args, **options):
        run_config = self.load_config(options)
        seed = run_config.train.seed
        out_dir = self.output_dir(options.get('out'), f"train_seed{seed}")

        self.stdout.write("=" * 60)
        self.stdout.write(self.style.SUCCESS("🎯 Toy Refinement Trainer"))
        self.stdout.write("=" * 60)
        self.stdout.write(
            f"seed={seed} layers={run_config.layers} steps={run_config.train.steps} "
            f"distill={run_config.train.distill}"
        )

        try:
            train_config = run_config.to_train_config()
            problem = generate_problem(
                seed,
                run_config.data.num_queries,
                run_config.data.num_gt,
                run_config.data.scene_size,
                run_config.data.noise,
                run_config.layers,
            )
        except ConfigurationError as e:
            raise CommandError(f"Configuration error: {e}", returncode=EXIT_CONFIG)

        self.write_text(out_dir / 'config.json', run_config.to_canonical_json())

        try:
            report = train(problem, train_config)
        except DivergenceError as e:
            self.write_text(out_dir / 'diagnostics.json', canonical_json({'error': str(e), **e.diagnostics}))
            if options.get('record'):
                TrainingRun.objects.create(
                    seed=str(seed),
                    steps=run_config.train.steps,
                    layers=run_config.layers,
                    distill=run_config.train.distill,
                    status='DIVERGED',
                    config=run_config.model_dump(mode='json'),
                    output_dir=str(out_dir),
                )
            self.stdout.write(self.style.ERROR(f"❌ Training diverged: {e}"))
            raise CommandError(f"Training diverged: {e}", returncode=EXIT_DIVERGED)

        metrics_csv = report.records.to_csv(index=False, lineterminator='\n')
        self.write_text(out_dir / 'metrics.csv', metrics_csv)
        summary = report.summary(problem, train_config)
        self.write_text(out_dir / 'summary.json', canonical_json(summary))

        if options.get('record'):
            run = TrainingRun.objects.create(
                seed=str(seed),
                steps=run_config.train.steps,
                layers=run_config.layers,
                distill=run_config.train.distill,
                status='COMPLETED',
                config=run_config.model_dump(mode='json'),
                final_iou_per_layer=summary['final_iou_per_layer'],
                final_pairs=summary['final_pairs'],
                wall_clock_seconds=report.wall_clock_seconds,
                output_dir=str(out_dir),
            )
            logger.info(f"💾 Recorded training run #{run.pk}")

        for layer, iou in enumerate(report.final_iou_per_layer, start=1):
            shown = 'n/a' if iou is None else f"{iou:.4f}"
            self.stdout.write(f"   Layer {layer}: mean matched IoU {shown}")
        if report.floored:
            self.stdout.write(self.style.WARNING(f"⚠️  {report.floored} probabilities hit the 1e-12 floor"))
        self.stdout.write(self.style.SUCCESS(
            f"✅ Finished in {report.wall_clock_seconds:.2f}s, wrote {out_dir}"
        ))
