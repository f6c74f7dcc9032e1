"""
Training objectives: softmax cross-entropy and the time-contrastive triplet loss.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .tensor import Rng, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TcnConfig:
    positive_window: int = 3
    margin: float = 0.2
    negatives_per_anchor: int = 1

    def __post_init__(self) -> None:
        if self.positive_window < 1:
            raise ConfigError(f"positive_window must be at least 1, got {self.positive_window}")
        if not self.margin > 0.0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.negatives_per_anchor < 1:
            raise ConfigError(f"negatives_per_anchor must be at least 1, got {self.negatives_per_anchor}")

    @property
    def min_length(self) -> int:
        return 2 * self.positive_window + 2


def cross_entropy(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over logits [K] or [B, K]."""
    num_classes = logits.shape[-1]
    targets = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(targets < 0) or np.any(targets >= num_classes):
        raise ShapeError(f"labels {targets.tolist()} out of range for {num_classes} classes")
    log_probs = T.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if targets.size != 1:
            raise ShapeError(f"a single logit row needs one label, got {targets.size}")
        return -log_probs[int(targets[0])]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"labels of shape {targets.shape} do not match logits {logits.shape}")
    picked = log_probs[np.arange(targets.size), targets]
    return -T.mean(picked)


def sample_triplets(length: int, cfg: TcnConfig, rng: Rng) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor, positive and negative frame indices; one row per (anchor, negative) draw."""
    if length < cfg.min_length:
        raise ShapeError(f"sequence of {length} frames is shorter than {cfg.min_length} (2*positive_window+2)")
    anchors: List[int] = []
    positives: List[int] = []
    negatives: List[int] = []
    frames = np.arange(length)
    w = cfg.positive_window
    for i in range(length):
        positive = int(rng.integers(max(0, i - w), min(length - 1, i + w) + 1))
        far = frames[np.abs(frames - i) > w]
        for negative in rng.choice(far, size=cfg.negatives_per_anchor):
            anchors.append(i)
            positives.append(positive)
            negatives.append(int(negative))
    return np.array(anchors), np.array(positives), np.array(negatives)


def tcn_loss(anchors: Tensor, others: Tensor, cfg: TcnConfig, rng: Rng) -> Tensor:
    """Triplet hinge on squared distances between view A frames and view B frames [T, m]."""
    if anchors.ndim != 2 or anchors.shape != others.shape:
        raise ShapeError(f"views must be synchronised [T, m] embeddings, got {anchors.shape} and {others.shape}")
    a_idx, p_idx, n_idx = sample_triplets(anchors.shape[0], cfg, rng)
    a = anchors[a_idx]
    d_pos = T.tsum((a - others[p_idx]) * (a - others[p_idx]), axis=-1)
    d_neg = T.tsum((a - others[n_idx]) * (a - others[n_idx]), axis=-1)
    return T.mean(T.relu(d_pos - d_neg + cfg.margin))
