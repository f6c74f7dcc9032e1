"""
Django admin configuration for trl3d app.
"""

from django.contrib import admin
from django.utils.safestring import mark_safe
from typing import Any

from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    """Admin interface for ExperimentRun model."""

    list_display = (
        'id',
        'command',
        'status_display',
        'seed',
        'library_version',
        'duration',
        'created_at'
    )
    list_filter = ('command', 'status', 'created_at')
    search_fields = ('run_dir', 'failure_reason')
    readonly_fields = ('created_at', 'finished_at', 'config', 'summary', 'library_version')
    ordering = ('-created_at',)

    fieldsets = (
        ('Run', {
            'fields': ('command', 'status', 'seed', 'run_dir', 'library_version')
        }),
        ('Results', {
            'fields': ('summary', 'failure_reason')
        }),
        ('Configuration', {
            'fields': ('config',),
            'classes': ('collapse',)
        }),
        ('Timestamps', {
            'fields': ('created_at', 'finished_at'),
            'classes': ('collapse',)
        }),
    )

    actions = ['rerun_experiments']

    @admin.display(description="Status")
    def status_display(self, obj: ExperimentRun) -> str:
        """Display status with color coding."""
        color = {
            ExperimentRun.Status.SUCCEEDED: 'green',
            ExperimentRun.Status.FAILED: 'red',
        }.get(obj.status, 'orange')
        return mark_safe(f'<span style="color: {color};">{obj.get_status_display()}</span>')

    @admin.display(description="Duration")
    def duration(self, obj: ExperimentRun) -> str:
        """Display wall time of finished runs."""
        seconds = obj.duration_seconds
        if seconds is None:
            return "-"
        return f"{seconds:.1f} s"

    @admin.action(description="Re-run selected experiments")
    def rerun_experiments(self, request: Any, queryset: Any) -> None:
        """Queue each selected run again with its recorded config."""
        from .tasks import run_experiment_task
        count = 0
        for run in queryset:
            run_experiment_task.delay(run.command, resolved=run.config)
            count += 1
        self.message_user(request, f"{count} experiment runs queued.")


admin.site.site_header = "trl3d Lab"
admin.site.site_title = "trl3d Lab Admin"
admin.site.index_title = "Experiment runs"
