"""
Central finite-difference checks of the autodiff engine against whole models.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import tensor as T
from .backbone import VisionTransformer
from .geometry import PatchGrid
from .layer import LayerConfig, LayerParams, forward_image
from .losses import cross_entropy
from .tensor import Rng, Tensor, no_grad

logger = logging.getLogger(__name__)

STEP = 1e-6
TOLERANCE = 1e-4
RELATIVE_FLOOR = 1e-5


@dataclass
class GradcheckResult:
    group: str
    checked: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), RELATIVE_FLOOR)


def check_tensor(
    name: str, target: Tensor, loss_fn: Callable[[], Tensor], samples: int, rng: Rng, step: float = STEP
) -> GradcheckResult:
    """
    Compare ``target.grad`` (already filled by a backward pass) with central differences.

    Args:
        name: Group name reported in the result
        target: Tensor whose entries are perturbed in place and restored
        loss_fn: Recomputes the scalar loss from the current values
        samples: Entries to check, drawn without replacement; 0 or at least ``target.size`` checks every entry
        rng: Stream the sampled entries are drawn from
        step: Finite-difference step

    Returns:
        The worst relative error over the checked entries
    """
    assert target.grad is not None, f"{name} has no gradient"
    if samples <= 0 or samples >= target.size:
        picks = np.arange(target.size)
    else:
        picks = rng.choice(target.size, size=samples, replace=False)
    count = len(picks)
    worst = 0.0
    for flat in picks:
        index = np.unravel_index(int(flat), target.shape)
        original = target.data[index]
        with no_grad():
            target.data[index] = original + step
            plus = loss_fn().item()
            target.data[index] = original - step
            minus = loss_fn().item()
        target.data[index] = original
        numeric = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(float(target.grad[index]), numeric))
    return GradcheckResult(group=name, checked=count, max_rel_error=worst)


def perturb(model: VisionTransformer, rng: Rng, scale: float = 0.1) -> None:
    """Add small noise to every parameter so zero-initialised layers pass gradient too."""
    for name, param in model.named_parameters():
        param.data = param.data + rng.child(name).normal(0.0, scale, param.shape)


def check_model(
    model: VisionTransformer, images: np.ndarray, labels: np.ndarray, samples: int, rng: Rng
) -> List[GradcheckResult]:
    """One result per parameter tensor of ``model`` under a cross-entropy loss."""

    def loss_fn() -> Tensor:
        logits = model(images).logits
        assert logits is not None
        return cross_entropy(logits, labels)

    model.zero_grad()
    loss_fn().backward()
    results = []
    for name, param in model.named_parameters():
        result = check_tensor(name, param, loss_fn, samples, rng.child(name))
        logger.debug(f"gradcheck {name}: {result.max_rel_error:.2e}")
        results.append(result)
    return results


def check_layer_input(
    cfg: LayerConfig, grid: PatchGrid, params: LayerParams, batch: int, samples: int, rng: Rng
) -> GradcheckResult:
    """Gradient of a fixed random projection of the layer output with respect to its input tokens."""
    tokens = Tensor(rng.child("tokens").normal(0.0, 1.0, (batch, grid.num_tokens + 1, cfg.embed_dim)), requires_grad=True)
    projection = rng.child("projection").normal(0.0, 1.0, tokens.shape)

    def loss_fn() -> Tensor:
        return T.tsum(forward_image(tokens, grid, cfg, params).tokens * projection)

    loss_fn().backward()
    return check_tensor("layer_input", tokens, loss_fn, samples, rng.child("layer_input"))


def run_gradcheck(
    model: VisionTransformer, samples: int, rng: Rng, batch: int = 2, labels: Optional[np.ndarray] = None
) -> List[GradcheckResult]:
    cfg = model.cfg
    perturb(model, rng.child("perturb"))
    images = rng.child("images").uniform(0.0, 1.0, (batch, cfg.image_size, cfg.image_size, cfg.channels))
    if labels is None:
        labels = rng.child("labels").integers(0, max(cfg.num_classes, 1), batch)
    results = check_model(model, images, labels, samples, rng.child("params"))
    trl3d = getattr(model, "trl3d", [])
    if trl3d:
        assert cfg.layer_cfg is not None
        results.append(check_layer_input(cfg.layer_cfg, model.grid, trl3d[0], batch, samples, rng.child("input")))
    failed = [r.group for r in results if not r.passed]
    if failed:
        logger.warning(f"Gradcheck failed for {len(failed)} groups: {failed[:5]}")
    else:
        logger.info(f"Gradcheck passed for all {len(results)} groups")
    return results
