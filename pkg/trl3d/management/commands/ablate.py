"""
Django management command to run the ablation sweep.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to run the ablation sweep."""

    help: str = "Train and evaluate the ablation variants over several seeds"
    command: str = 'ablate'
