"""
Shared base for the experiment management commands.
"""

from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError
from typing import Any
import json
import logging

from trl3d.exceptions import Trl3dError
from trl3d.runconfig import load_run_config
from trl3d.services import run_experiment
from trl3d.tasks import run_experiment_task

logger = logging.getLogger(__name__)


class ExperimentCommand(BaseCommand):
    """Run one experiment command inline or queue it on Celery."""

    command: str = ''

    def add_arguments(self, parser: Any) -> None:
        """Add command arguments."""
        parser.add_argument(
            '--config',
            default=None,
            help='key=value RunConfig file (defaults for every key when omitted)',
        )
        parser.add_argument(
            '--out',
            default=None,
            help='Override the out key: directory that receives the run directory',
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help='Override the seed key (unsigned 64-bit integer)',
        )
        parser.add_argument(
            '--async',
            action='store_true',
            help='Queue the run as a Celery task instead of running it here',
        )

    def handle(self, *args: Any, **options: Any) -> None:
        """Handle the command execution."""
        config_path = options.get('config')
        out = options.get('out')
        seed = options.get('seed')

        if options.get('async', False):
            task = run_experiment_task.delay(self.command, config_path, out, seed)
            self.stdout.write(
                self.style.SUCCESS(f"{self.command} task queued with ID: {task.id}")
            )
            return

        try:
            cfg = load_run_config(config_path, seed=seed, out=out)
            ctx = run_experiment(self.command, cfg)
        except Trl3dError as e:
            reason = f"{type(e).__name__}: {e}".splitlines()[0]
            logger.error(f"{self.command} failed: {reason}")
            raise CommandError(reason) from e
        except DatabaseError as e:
            reason = f"DatabaseError: {e}".splitlines()[0]
            logger.error(f"{self.command} failed: {reason} (run `python manage.py migrate`?)")
            raise CommandError(reason) from e

        self.stdout.write(self.style.SUCCESS(f"{self.command} finished: {ctx.run_dir}"))
        self.stdout.write(json.dumps(ctx.summary, indent=2, sort_keys=True, default=str))
