"""
Django management command to train the video alignment encoder.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to train the video alignment encoder."""

    help: str = "Train a frame embedding with the time-contrastive loss"
    command: str = 'train_align'
