"""
Celery tasks for running experiments in a worker.
"""

from celery import shared_task
from typing import Any, Dict, List, Optional
import logging

from .runconfig import from_resolved, load_run_config
from .services import evaluate_pair, run_experiment

logger = logging.getLogger(__name__)


@shared_task(bind=True)
def run_experiment_task(
    self: Any,
    command: str,
    config_path: Optional[str] = None,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    resolved: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Run one experiment command in the worker.

    Args:
        command: Name of the command, e.g. ``train_align``
        config_path: RunConfig file, defaults only when omitted
        out: Override for the ``out`` key
        seed: Override for the ``seed`` key
        resolved: A recorded config (as stored on ExperimentRun) used instead of a file

    Returns:
        Run id, run directory and the run summary
    """
    try:
        logger.info(f"Starting {command} task {self.request.id}")
        if resolved is not None:
            cfg = from_resolved({**resolved, **{k: v for k, v in (("seed", seed), ("out", out)) if v is not None}})
        else:
            cfg = load_run_config(config_path, seed=seed, out=out)
        ctx = run_experiment(command, cfg)
        return {'run_id': ctx.run.pk, 'run_dir': str(ctx.run_dir), 'summary': ctx.summary}
    except Exception as e:
        logger.error(f"Error in {command} task: {e}")
        raise


@shared_task(bind=True)
def evaluate_pair_task(self: Any, pair_id: int, anchors: List[List[float]], others: List[List[float]]) -> Dict[str, Any]:
    """Alignment metrics for one pair of frame embeddings."""
    try:
        return evaluate_pair(pair_id, anchors, others)
    except Exception as e:
        logger.error(f"Error evaluating pair {pair_id}: {e}")
        raise
