# Generated by Django 5.0.1 on 2026-10-17 09:12

import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="TrainingRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "seed",
                    models.CharField(
                        help_text="Toy problem seed (u64, decimal digits)", max_length=20
                    ),
                ),
                ("steps", models.IntegerField()),
                ("layers", models.IntegerField()),
                ("distill", models.BooleanField(default=True)),
                (
                    "status",
                    models.CharField(
                        choices=[("COMPLETED", "Completed"), ("DIVERGED", "Diverged")],
                        default="COMPLETED",
                        max_length=10,
                    ),
                ),
                (
                    "config",
                    models.JSONField(default=dict, help_text="Effective RunConfig"),
                ),
                (
                    "final_iou_per_layer",
                    models.JSONField(blank=True, default=list),
                ),
                ("final_pairs", models.JSONField(blank=True, default=list)),
                (
                    "wall_clock_seconds",
                    models.FloatField(blank=True, null=True),
                ),
                ("output_dir", models.CharField(blank=True, max_length=500)),
                (
                    "created_at",
                    models.DateTimeField(default=django.utils.timezone.now),
                ),
            ],
            options={
                "ordering": ["-created_at"],
            },
        ),
    ]
