"""
The 3D token representation layer.

Patch tokens are lifted to 3D: a per-token MLP predicts a pseudo-depth, the
token-centre image coordinates are back-projected with the pinhole model, a
camera estimator pooled over all tokens predicts a rotation and translation,
and the resulting world coordinates are embedded and fused back into the
tokens. The CLS slot passes through untouched and the token shape is kept.
"""

import enum
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .geometry import CameraExtrinsics, PatchGrid
from .nn import Linear, Mlp, Module
from .tensor import Rng, Tensor

logger = logging.getLogger(__name__)


class CoordMode(str, enum.Enum):
    DEPTH = "depth"
    DIRECT_XYZ = "direct_xyz"


class FusionMode(str, enum.Enum):
    EMBEDDING = "embedding"
    CONCAT = "concat"


class VideoStrategy(str, enum.Enum):
    DIVIDED = "DT"
    JOINT = "JT"


@dataclass(frozen=True)
class LayerConfig:
    embed_dim: int
    focal: float = 1.0
    coord_mode: CoordMode = CoordMode.DEPTH
    fusion_mode: FusionMode = FusionMode.EMBEDDING
    video_strategy: VideoStrategy = VideoStrategy.DIVIDED
    stem_hidden: int = 32

    def __post_init__(self) -> None:
        if self.embed_dim < 4:
            raise ConfigError(f"embed_dim must be at least 4, got {self.embed_dim}")
        if self.stem_hidden < 3:
            raise ConfigError(f"stem_hidden must be at least 3, got {self.stem_hidden}")
        if not self.focal > 0.0:
            raise ConfigError(f"focal must be positive, got {self.focal}")
        for name, kind in (("coord_mode", CoordMode), ("fusion_mode", FusionMode), ("video_strategy", VideoStrategy)):
            try:
                object.__setattr__(self, name, kind(getattr(self, name)))
            except ValueError:
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}") from None


class LayerParams(Module):
    """Learnable parts of one layer instance; hidden widths equal the embedding width."""

    def __init__(self, cfg: LayerConfig, rng: Rng) -> None:
        m, hidden = cfg.embed_dim, cfg.stem_hidden
        if cfg.coord_mode is CoordMode.DEPTH:
            self.depth_mlp = Mlp([m, m, 1], rng.child("depth_mlp"))
            self.stem = Mlp([m, m, m, hidden, hidden], rng.child("stem"))
            self.rot_head = Linear(hidden, 3, rng.child("rot_head"))
            self.trans_head = Linear(hidden, 3, rng.child("trans_head"))
        else:
            # regresses world coordinates directly, no camera involved
            self.depth_mlp = Mlp([m, m, 3], rng.child("depth_mlp"))
        if cfg.fusion_mode is FusionMode.EMBEDDING:
            self.embed_mlp = Mlp([3, m, m], rng.child("embed_mlp"), zero_last=True)
        else:
            self.concat_proj = Linear(m + 3, m, rng.child("concat_proj"))


@dataclass
class LayerOutput:
    tokens: Tensor
    world_coords: Tensor
    pseudo_depth: Optional[Tensor] = None
    rotation: Optional[Tensor] = None
    translation: Optional[Tensor] = None

    def extrinsics(self) -> List[CameraExtrinsics]:
        """Estimated cameras, flattened over every leading axis."""
        if self.rotation is None or self.translation is None:
            return []
        rotations = self.rotation.data.reshape(-1, 3, 3)
        translations = self.translation.data.reshape(-1, 3)
        return [CameraExtrinsics(R=R, t=t) for R, t in zip(rotations, translations)]


def rotation_from_angles(angles: Tensor) -> Tensor:
    """Differentiable ``Rz(yaw) Ry(pitch) Rx(roll)`` for angles of shape [..., 3]."""
    yaw, pitch, roll = angles[..., 0], angles[..., 1], angles[..., 2]
    cy, sy = T.cos(yaw), T.sin(yaw)
    cp, sp = T.cos(pitch), T.sin(pitch)
    cr, sr = T.cos(roll), T.sin(roll)
    entries = [
        cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
        sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
        -sp, cp * sr, cp * cr,
    ]
    return T.reshape(T.stack(entries, axis=-1), angles.shape[:-1] + (3, 3))


def lift_to_camera(depth: Tensor, grid: PatchGrid) -> Tensor:
    """Back-project token centres with per-token depth [..., N] to camera points [..., N, 3]."""
    k = grid.intrinsics
    x = depth * ((grid.u - k.u0) / k.c)
    y = depth * ((grid.v - k.v0) / k.c)
    return T.stack([x, y, depth], axis=-1)


def camera_to_world(points: Tensor, rotation: Tensor, translation: Tensor) -> Tensor:
    """``R^T p + R^T t`` on row vectors; points [..., N, 3], R [..., 3, 3], t [..., 3]."""
    shifted = points + T.reshape(translation, translation.shape[:-1] + (1, 3))
    return T.matmul(shifted, rotation)


def estimate_pseudo_depth(S: Tensor, p: LayerParams) -> Tensor:
    """One depth per token, applied independently to every token of S [..., N, m]."""
    width = p.depth_mlp.layers[0].fan_in
    if S.shape[-1] != width:
        raise ShapeError(f"tokens of width {S.shape[-1]} do not match embed_dim {width}")
    out = p.depth_mlp(S)
    return T.reshape(out, out.shape[:-1])


def _camera_heads(pooled: Tensor, p: LayerParams) -> Tuple[Tensor, Tensor]:
    return rotation_from_angles(p.rot_head(pooled)), p.trans_head(pooled)


def estimate_camera(S: Tensor, p: LayerParams) -> Tuple[Tensor, Tensor]:
    """
    Predict one camera per token set.

    Args:
        S: Patch tokens [..., N, m], N >= 1
        p: Parameters with a camera stem and rotation/translation heads

    Returns:
        Rotation [..., 3, 3] from predicted Euler angles and translation [..., 3], both
        read off the stem features mean-pooled over the tokens
    """
    if S.shape[-2] < 1:
        raise ShapeError("camera estimation needs at least one token")
    return _camera_heads(T.mean(p.stem(S), axis=-2), p)


def _estimate_camera_joint(S: Tensor, p: LayerParams) -> Tuple[Tensor, Tensor]:
    """One camera per clip from tokens [..., T, N, m], pooled over all T*N tokens."""
    features = p.stem(S)
    flat = T.reshape(features, features.shape[:-3] + (features.shape[-3] * features.shape[-2], features.shape[-1]))
    return _camera_heads(T.mean(flat, axis=-2), p)


def _fuse(patches: Tensor, world: Tensor, cfg: LayerConfig, p: LayerParams) -> Tensor:
    if cfg.fusion_mode is FusionMode.EMBEDDING:
        return patches + p.embed_mlp(world)
    return T.relu(p.concat_proj(T.concat([patches, world], axis=-1)))


def _check_tokens(S: Tensor, grid: PatchGrid, cfg: LayerConfig) -> None:
    if S.ndim < 2 or S.shape[-2] != grid.num_tokens + 1:
        raise ShapeError(
            f"expected {grid.num_tokens} patch tokens plus CLS for a {grid.rows}x{grid.cols} grid, got shape {S.shape}"
        )
    if S.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"tokens of width {S.shape[-1]} do not match embed_dim {cfg.embed_dim}")


def _split_cls(S: Tensor) -> Tuple[Tensor, Tensor]:
    return S[..., :1, :], S[..., 1:, :]


def forward_image(S: Tensor, grid: PatchGrid, cfg: LayerConfig, p: LayerParams) -> LayerOutput:
    """
    Apply the layer to tokens of independent images.

    Args:
        S: Tokens [..., 1+N, m], CLS first, patches in the row-major order of ``grid``
        grid: Token-centre image coordinates and the intrinsics used to back-project them
        cfg: Layer settings; ``coord_mode`` and ``fusion_mode`` pick the variant
        p: Parameters built for the same ``cfg``

    Returns:
        Fused tokens of the input shape plus the world coordinates, and the pseudo-depth
        and camera when ``coord_mode`` is depth
    """
    _check_tokens(S, grid, cfg)
    cls, patches = _split_cls(S)
    if cfg.coord_mode is CoordMode.DIRECT_XYZ:
        world = p.depth_mlp(patches)
        return LayerOutput(tokens=T.concat([cls, _fuse(patches, world, cfg, p)], axis=-2), world_coords=world)

    depth = estimate_pseudo_depth(patches, p)
    rotation, translation = estimate_camera(patches, p)
    world = camera_to_world(lift_to_camera(depth, grid), rotation, translation)
    return LayerOutput(
        tokens=T.concat([cls, _fuse(patches, world, cfg, p)], axis=-2),
        world_coords=world,
        pseudo_depth=depth,
        rotation=rotation,
        translation=translation,
    )


def forward_video(S: Tensor, grid: PatchGrid, cfg: LayerConfig, p: LayerParams) -> LayerOutput:
    """
    Apply the layer to a clip.

    DT estimates one camera per frame; JT pools the camera stem over every
    token of the clip and shares the single camera across its frames.

    Args:
        S: Tokens [..., T, 1+N, m]
        grid: Patch grid shared by every frame
        cfg: Layer settings, ``video_strategy`` included
        p: Parameters built for the same ``cfg``

    Returns:
        Per-frame outputs; under JT ``rotation`` is [..., 3, 3] with no time axis
    """
    _check_tokens(S, grid, cfg)
    if S.ndim < 3:
        raise ShapeError(f"video tokens need a time axis, got shape {S.shape}")
    if cfg.coord_mode is CoordMode.DIRECT_XYZ or cfg.video_strategy is VideoStrategy.DIVIDED:
        return forward_image(S, grid, cfg, p)

    cls, patches = _split_cls(S)
    depth = estimate_pseudo_depth(patches, p)
    rotation, translation = _estimate_camera_joint(patches, p)
    shared_rotation = T.reshape(rotation, rotation.shape[:-2] + (1, 3, 3))
    shared_translation = T.reshape(translation, translation.shape[:-1] + (1, 3))
    world = camera_to_world(lift_to_camera(depth, grid), shared_rotation, shared_translation)
    return LayerOutput(
        tokens=T.concat([cls, _fuse(patches, world, cfg, p)], axis=-2),
        world_coords=world,
        pseudo_depth=depth,
        rotation=rotation,
        translation=translation,
    )


def parameter_count(cfg: LayerConfig) -> int:
    """Closed-form size of one layer instance."""
    m, h = cfg.embed_dim, cfg.stem_hidden
    if cfg.coord_mode is CoordMode.DEPTH:
        estimators = (m * m + m) + (m + 1)
        estimators += 2 * (m * m + m) + (m * h + h) + (h * h + h) + 2 * (3 * h + 3)
    else:
        estimators = (m * m + m) + (3 * m + 3)
    if cfg.fusion_mode is FusionMode.EMBEDDING:
        fusion = (3 * m + m) + (m * m + m)
    else:
        fusion = (m + 3) * m + m
    return estimators + fusion


class MlpControl(Module):
    """Residual per-token MLP sized like one 3DTRL instance; CLS bypasses it."""

    def __init__(self, cfg: LayerConfig, rng: Rng) -> None:
        m = cfg.embed_dim
        self.mlp = Mlp([m, matched_hidden_width(cfg), m], rng.child("mlp"), zero_last=True)

    def __call__(self, S: Tensor) -> Tensor:
        cls, patches = _split_cls(S)
        return T.concat([cls, patches + self.mlp(patches)], axis=-2)


def matched_hidden_width(cfg: LayerConfig) -> int:
    """Hidden width h of an m -> h -> m MLP whose size is closest to the layer's."""
    m = cfg.embed_dim
    return max(1, int(np.rint((parameter_count(cfg) - m) / (2 * m + 1))))
