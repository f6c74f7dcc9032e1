"""
Evaluation metrics: nearest-neighbour frame alignment, Kendall's tau over
frame orderings, Pearson depth correlation with Fisher z-averaging and
Procrustes disparity for camera trajectories.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial import procrustes
from scipy.spatial.distance import cdist
from scipy.stats import pearsonr

from .exceptions import MetricError
from .geometry import CameraExtrinsics

logger = logging.getLogger(__name__)


@dataclass
class AlignmentReport:
    alignment_error: float
    cycle_error: float
    kendall_tau: float
    nn_map_ab: np.ndarray = field(repr=False)
    nn_map_ba: np.ndarray = field(repr=False)

    @property
    def num_frames(self) -> int:
        return len(self.nn_map_ab)


@dataclass
class DisparityReport:
    position_disparity: float
    orientation_disparity: float


@dataclass
class DepthReport:
    """Per-sample correlations (nan where a sample had too little ground truth) and their Fisher mean."""

    per_sample_r: List[float]
    coverage: List[float]
    mean_r: float


def _embeddings(values: np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2 or array.shape[0] == 0:
        raise MetricError(f"{name} must be a non-empty [N, m] array, got shape {array.shape}")
    return array


def nearest_neighbours(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """For each row of U the index of its closest row of V; ties go to the lowest index."""
    return np.argmin(cdist(U, V, metric="sqeuclidean"), axis=1)


def nn_align(U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-neighbour alignment of two equal-length frame sequences.

    Args:
        U: Frame embeddings [N, m] of the first view (a 1-D array is read as m=1)
        V: Frame embeddings [N, m] of the second view

    Returns:
        The forward map j(i) from U into V and the cycle map k(i) = nn_V->U(j(i)) back into U
    """
    U, V = _embeddings(U, "U"), _embeddings(V, "V")
    if U.shape != V.shape:
        raise MetricError(f"sequences differ in shape: {U.shape} vs {V.shape}")
    forward = nearest_neighbours(U, V)
    backward = nearest_neighbours(V, U)
    return forward, backward[forward]


def _map_error(index_map: Sequence[int], n: int) -> float:
    indices = np.asarray(index_map, dtype=np.int64)
    if n < 1 or indices.shape != (n,):
        raise MetricError(f"index map of shape {indices.shape} does not cover {n} frames")
    if np.any(indices < 0) or np.any(indices >= n):
        raise MetricError("index map points outside the sequence")
    return float(np.mean(np.abs(np.arange(n) - indices)) / n)


def alignment_error(j_map: Sequence[int], n: int) -> float:
    """Mean ``|i - j(i)| / n``; 0 for the identity map."""
    return _map_error(j_map, n)


def cycle_error(k_map: Sequence[int], n: int) -> float:
    return _map_error(k_map, n)


def kendall_tau_from_map(j_map: Sequence[int]) -> float:
    """Tau over all frame pairs; a tied pair (same neighbour) counts as discordant."""
    indices = np.asarray(j_map, dtype=np.int64)
    n = len(indices)
    if n < 2:
        raise MetricError(f"kendall_tau needs at least 2 frames, got {n}")
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    concordant = int(np.sum((indices[None, :] > indices[:, None]) & upper))
    pairs = n * (n - 1) // 2
    return (concordant - (pairs - concordant)) / pairs


def kendall_tau(U: np.ndarray, V: np.ndarray) -> float:
    """
    Ordering agreement between the frames of U and their nearest neighbours in V.

    Args:
        U: Frame embeddings [N, m], N >= 2
        V: Frame embeddings [N, m]

    Returns:
        Tau in [-1, 1]; 1 when the neighbour indices increase with i
    """
    U, V = _embeddings(U, "U"), _embeddings(V, "V")
    if len(U) < 2:
        raise MetricError(f"kendall_tau needs at least 2 frames, got {len(U)}")
    return kendall_tau_from_map(nearest_neighbours(U, V))


def alignment_report(U: np.ndarray, V: np.ndarray) -> AlignmentReport:
    """All alignment numbers for one synchronised pair, measured from U into V."""
    forward, cycle = nn_align(U, V)
    n = len(forward)
    return AlignmentReport(
        alignment_error=alignment_error(forward, n),
        cycle_error=cycle_error(cycle, n),
        kendall_tau=kendall_tau_from_map(forward),
        nn_map_ab=forward,
        nn_map_ba=nearest_neighbours(_embeddings(V, "V"), _embeddings(U, "U")),
    )


def pearson_r(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of two flattened samples; constant inputs are an error, not nan."""
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.size < 2:
        raise MetricError(f"pearson_r needs two equal-length samples of at least 2 values, got {x.size} and {y.size}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise MetricError("degenerate map: zero variance")
    r = float(pearsonr(x, y)[0])
    return float(np.clip(r, -1.0, 1.0))


def fisher_mean_r(rs: Sequence[float]) -> float:
    """
    Average correlations in Fisher z-space: ``tanh(mean(arctanh(r)))``.

    Args:
        rs: Correlations strictly inside (-1, 1)

    Returns:
        The back-transformed mean correlation
    """
    values = np.asarray(rs, dtype=np.float64)
    if values.size == 0:
        raise MetricError("fisher_mean_r needs at least one correlation")
    if np.any(np.abs(values) >= 1.0) or not np.all(np.isfinite(values)):
        raise MetricError(f"correlations must lie strictly inside (-1, 1), got {values.tolist()}")
    return float(np.tanh(np.mean(np.arctanh(values))))


def procrustes_disparity(X: np.ndarray, Y: np.ndarray) -> float:
    """Residual after the best similarity alignment of Y onto X (reflections allowed), in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise MetricError(f"point sets must share shape [n, d], got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise MetricError(f"procrustes needs at least 3 points, got {X.shape[0]}")
    if np.allclose(X, X[0], rtol=0.0, atol=1e-15) or np.allclose(Y, Y[0], rtol=0.0, atol=1e-15):
        raise MetricError("degenerate point set: all points coincide")
    try:
        _, _, disparity = procrustes(X, Y)
    except ValueError as e:
        raise MetricError(f"degenerate point set: {e}") from e
    return float(np.clip(disparity, 0.0, 1.0))


def camera_eval(est: Sequence[CameraExtrinsics], gt: Sequence[CameraExtrinsics]) -> DisparityReport:
    """
    Compare an estimated camera track with the true one, frame by frame.

    Args:
        est: Estimated extrinsics, one per frame
        gt: Ground-truth extrinsics for the same frames (at least 3)

    Returns:
        Procrustes disparity of the camera centres and of the viewing directions
    """
    if len(est) != len(gt):
        raise MetricError(f"estimated and ground-truth sequences differ in length: {len(est)} vs {len(gt)}")
    if len(est) < 3:
        raise MetricError(f"camera evaluation needs at least 3 frames, got {len(est)}")
    return DisparityReport(
        position_disparity=procrustes_disparity(
            np.stack([e.center for e in est]), np.stack([g.center for g in gt])
        ),
        orientation_disparity=procrustes_disparity(
            np.stack([e.looking_at for e in est]), np.stack([g.looking_at for g in gt])
        ),
    )


def depth_correlation(pred: np.ndarray, gt: np.ndarray, min_patches: int = 3) -> DepthReport:
    """
    Correlate predicted and true per-patch depth, one sample at a time.

    Args:
        pred: Pseudo-depth [samples, patches]
        gt: Ground-truth depth of the same shape; non-finite entries mark empty patches and are skipped
        min_patches: Fewest lit patches a sample needs to get a correlation

    Returns:
        Per-sample r (nan below ``min_patches``), lit-patch coverage and the Fisher mean over valid samples

    Raises:
        MetricError: When no sample can be correlated
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise MetricError(f"depth maps must share shape [samples, patches], got {pred.shape} and {gt.shape}")
    rs: List[float] = []
    coverage: List[float] = []
    for sample_pred, sample_gt in zip(pred, gt):
        lit = np.isfinite(sample_gt)
        coverage.append(float(np.mean(lit)))
        try:
            if lit.sum() < min_patches:
                raise MetricError("too few lit patches")
            rs.append(pearson_r(sample_pred[lit], sample_gt[lit]))
        except MetricError:
            rs.append(float("nan"))
    valid = [r for r in rs if np.isfinite(r)]
    if not valid:
        raise MetricError("no sample had enough ground-truth depth to correlate")
    # keep Fisher's transform finite on perfect correlations
    clipped = np.clip(valid, -1.0 + 1e-12, 1.0 - 1e-12)
    mean_r = fisher_mean_r(clipped)
    logger.debug(f"Depth correlation over {len(valid)}/{len(rs)} samples: {mean_r:.4f}")
    return DepthReport(per_sample_r=rs, coverage=coverage, mean_r=mean_r)
