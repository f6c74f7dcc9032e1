"""
Django management command to evaluate depth estimation.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to evaluate depth estimation."""

    help: str = "Correlate pseudo-depth with ground-truth patch depth"
    command: str = 'eval_depth'
