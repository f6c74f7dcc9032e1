"""
Django management command to train the image classifier.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to train the image classifier."""

    help: str = "Train a classifier and report standard and held-out-viewpoint accuracy"
    command: str = 'train_classify'
