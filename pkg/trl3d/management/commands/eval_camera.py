"""
Django management command to evaluate camera estimation.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to evaluate camera estimation."""

    help: str = "Measure camera position and orientation disparity over training snapshots"
    command: str = 'eval_camera'
