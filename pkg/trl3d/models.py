"""
Models for the trl3d app.
"""

from django.db import models
from django.utils import timezone
from typing import Any, Dict, Optional
import logging

logger = logging.getLogger(__name__)


class ExperimentRun(models.Model):
    """One invocation of an experiment command and where its artifacts landed."""

    class Command(models.TextChoices):
        GEN_DATA = 'gen_data', 'Generate data'
        TRAIN_CLASSIFY = 'train_classify', 'Train classifier'
        TRAIN_ALIGN = 'train_align', 'Train aligner'
        EVAL_ALIGN = 'eval_align', 'Evaluate alignment'
        EVAL_DEPTH = 'eval_depth', 'Evaluate depth'
        EVAL_CAMERA = 'eval_camera', 'Evaluate cameras'
        GRADCHECK = 'gradcheck', 'Gradient check'
        ABLATE = 'ablate', 'Ablation sweep'

    class Status(models.TextChoices):
        RUNNING = 'RUNNING', 'Running'
        SUCCEEDED = 'SUCCEEDED', 'Succeeded'
        FAILED = 'FAILED', 'Failed'

    command = models.CharField(max_length=32, choices=Command.choices)
    status = models.CharField(
        max_length=16,
        choices=Status.choices,
        default=Status.RUNNING
    )
    # unsigned 64-bit seeds overflow BigIntegerField
    seed = models.DecimalField(max_digits=20, decimal_places=0, default=0)
    run_dir = models.CharField(max_length=1024, blank=True)
    config: models.JSONField = models.JSONField(default=dict)
    summary: models.JSONField = models.JSONField(default=dict, blank=True)
    failure_reason = models.TextField(blank=True)
    library_version = models.CharField(max_length=32)
    created_at: models.DateTimeField = models.DateTimeField(auto_now_add=True)
    finished_at: models.DateTimeField = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = 'experiment_runs'
        ordering = ['-created_at', '-id']

    def __str__(self) -> str:
        return f"{self.command} #{self.pk} ({self.status})"

    @property
    def duration_seconds(self) -> Optional[float]:
        """Wall time of a finished run."""
        if self.finished_at is None or self.created_at is None:
            return None
        return (self.finished_at - self.created_at).total_seconds()

    def mark_succeeded(self, summary: Dict[str, Any]) -> None:
        """Record the headline numbers and close the run."""
        self.status = self.Status.SUCCEEDED
        self.summary = summary
        self.finished_at = timezone.now()
        self.save()
        logger.info(f"Run {self.pk} ({self.command}) succeeded")

    def mark_failed(self, reason: str) -> None:
        """Close the run with a one-line reason."""
        self.status = self.Status.FAILED
        self.failure_reason = reason
        self.finished_at = timezone.now()
        self.save()
        logger.info(f"Run {self.pk} ({self.command}) failed: {reason}")
