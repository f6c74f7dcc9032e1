"""
Django management command to generate the synthetic dataset.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to generate the synthetic dataset."""

    help: str = "Generate the synthetic dataset (classification views and alignment pairs)"
    command: str = 'gen_data'
