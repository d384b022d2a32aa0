from django.contrib import admin
from .models import TrainingRun


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ['id', 'seed', 'steps', 'layers', 'distill', 'status', 'final_layer_iou', 'created_at']
    list_filter = ['status', 'distill', 'created_at']
    search_fields = ['output_dir']
    readonly_fields = ['created_at', 'wall_clock_seconds']
