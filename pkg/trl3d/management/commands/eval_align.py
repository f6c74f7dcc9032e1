"""
Django management command to evaluate video alignment.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to evaluate video alignment."""

    help: str = "Evaluate alignment on the seen and unseen camera splits"
    command: str = 'eval_align'
