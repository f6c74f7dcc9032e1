"""
Django management command to run the gradient check.
"""

from ._experiment import ExperimentCommand


class Command(ExperimentCommand):
    """Management command to run the gradient check."""

    help: str = "Check analytic gradients against central finite differences"
    command: str = 'gradcheck'
