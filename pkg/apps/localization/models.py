from django.db import models
from django.utils import timezone


class TrainingRun(models.Model):
    """One toy-trainer invocation recorded with `train --record`"""
    STATUS_CHOICES = [
        ('COMPLETED', 'Completed'),
        ('DIVERGED', 'Diverged'),
    ]

    seed = models.CharField(max_length=20, help_text='Toy problem seed (u64, decimal digits)')
    steps = models.IntegerField()
    layers = models.IntegerField()
    distill = models.BooleanField(default=True)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='COMPLETED')
    config = models.JSONField(default=dict, help_text='Effective RunConfig')
    final_iou_per_layer = models.JSONField(default=list, blank=True)
    final_pairs = models.JSONField(default=list, blank=True)
    wall_clock_seconds = models.FloatField(null=True, blank=True)
    output_dir = models.CharField(max_length=500, blank=True)
    created_at = models.DateTimeField(default=timezone.now)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"Run seed={self.seed} steps={self.steps} {self.status}"

    @property
    def final_layer_iou(self):
        if not self.final_iou_per_layer:
            return None
        return self.final_iou_per_layer[-1]
