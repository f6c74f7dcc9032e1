"""
Training and inference loops over the synthetic datasets.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .backbone import VisionTransformer
from .losses import TcnConfig, cross_entropy, tcn_loss
from .optim import SGD, clip_grad_norm, make_optimizer
from .runconfig import RunConfig
from .synthdata import PairSet, ViewSet
from .tensor import Rng, no_grad

logger = logging.getLogger(__name__)

SnapshotFn = Callable[[VisionTransformer, int], None]


@dataclass
class StepRecord:
    step: int
    loss: float


def build_model(cfg: RunConfig, num_classes: Optional[int] = None) -> VisionTransformer:
    """Fresh model for ``cfg``; the same seed always gives the same backbone weights."""
    return VisionTransformer(cfg.backbone_config(num_classes), Rng(cfg.seed).child("model"))


def _log_every(steps: int) -> int:
    return max(1, steps // 10)


def snapshot_steps(percentages: List[int], steps: int) -> Dict[int, List[int]]:
    """Map training step -> snapshot percentages taken just before that step (step == steps is the end)."""
    schedule: Dict[int, List[int]] = {}
    for pct in sorted(set(percentages)):
        schedule.setdefault(int(round(pct * steps / 100)), []).append(pct)
    return schedule


def train_classifier(model: VisionTransformer, views: ViewSet, cfg: RunConfig, rng: Rng) -> List[StepRecord]:
    optimizer = SGD(model.parameters(), cfg.lr, cfg.momentum)
    n = len(views)
    size = min(cfg.batch, n)
    history: List[StepRecord] = []
    for step in range(cfg.steps):
        picks = rng.child(step).choice(n, size=size, replace=False)
        logits = model(views.images[picks]).logits
        assert logits is not None
        loss = cross_entropy(logits, views.labels[picks])
        loss.backward()
        optimizer.step()
        history.append(StepRecord(step=step, loss=loss.item()))
        if step % _log_every(cfg.steps) == 0 or step == cfg.steps - 1:
            logger.info(f"classify step {step + 1}/{cfg.steps}: loss={loss.item():.4f}")
    return history


def train_aligner(
    model: VisionTransformer,
    pairs: PairSet,
    cfg: RunConfig,
    rng: Rng,
    on_snapshot: Optional[SnapshotFn] = None,
) -> List[StepRecord]:
    """
    One synchronised pair per step under the time-contrastive loss, view A frames as anchors.

    Uses ``align_optimizer`` at ``align_lr``; gradients are clipped to ``clip_norm`` before every update.
    """
    tcn: TcnConfig = cfg.tcn_config()
    optimizer = make_optimizer(cfg.align_optimizer, model.parameters(), cfg.align_lr, cfg.momentum)
    schedule = snapshot_steps(list(cfg.snapshots), cfg.steps) if on_snapshot else {}
    history: List[StepRecord] = []
    for step in range(cfg.steps):
        for pct in schedule.get(step, []):
            assert on_snapshot is not None
            on_snapshot(model, pct)
        step_rng = rng.child(step)
        pair = int(step_rng.integers(0, len(pairs)))
        anchors = model(pairs.view_a.images[pair], clip=True).embedding
        others = model(pairs.view_b.images[pair], clip=True).embedding
        assert anchors is not None and others is not None
        loss = tcn_loss(anchors, others, tcn, step_rng.child("tcn"))
        loss.backward()
        grad_norm = clip_grad_norm(optimizer.params, cfg.clip_norm)
        optimizer.step()
        history.append(StepRecord(step=step, loss=loss.item()))
        if step % _log_every(cfg.steps) == 0 or step == cfg.steps - 1:
            logger.info(f"align step {step + 1}/{cfg.steps}: tcn_loss={loss.item():.4f} grad_norm={grad_norm:.3g}")
    for pct in schedule.get(cfg.steps, []):
        assert on_snapshot is not None
        on_snapshot(model, pct)
    return history


def predict(model: VisionTransformer, images: np.ndarray, batch: int = 64) -> np.ndarray:
    predictions = []
    with no_grad():
        for start in range(0, len(images), batch):
            logits = model(images[start : start + batch]).logits
            assert logits is not None
            predictions.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def accuracy(model: VisionTransformer, views: ViewSet) -> float:
    if len(views) == 0:
        return float("nan")
    return float(np.mean(predict(model, views.images) == views.labels))


def embed_clip(model: VisionTransformer, frames: np.ndarray) -> np.ndarray:
    """Unit-norm frame embeddings [T, m] for one clip [T, H, W, ch]."""
    with no_grad():
        embedding = model(frames, clip=True).embedding
    assert embedding is not None
    return embedding.data


def pseudo_depth(model: VisionTransformer, frames: np.ndarray, instance: int = 0) -> np.ndarray:
    """Per-token pseudo-depth [T, N] of one inserted layer for a clip."""
    with no_grad():
        outputs = model(frames, clip=True).layer_outputs
    depth = outputs[instance].pseudo_depth
    assert depth is not None
    return depth.data
