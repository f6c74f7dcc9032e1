"""
Small ViT-style encoder with insertable 3DTRL (or MLP control) instances.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .geometry import CameraIntrinsics, PatchGrid, make_patch_grid
from .layer import LayerConfig, LayerOutput, LayerParams, MlpControl, forward_image, forward_video
from .nn import Linear, Module
from .tensor import Rng, Tensor, parameter

logger = logging.getLogger(__name__)


class InsertModule(str, enum.Enum):
    TRL3D = "trl3d"
    MLP = "mlp"


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    depth: int = 6
    heads: int = 3
    embed_dim: int = 48
    mlp_ratio: int = 2
    num_classes: int = 4
    insert_at: Tuple[int, ...] = (2,)
    insert_module: InsertModule = InsertModule.TRL3D
    layer_cfg: Optional[LayerConfig] = None

    def __post_init__(self) -> None:
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.depth < 0 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.num_classes < 0:
            raise ConfigError(f"num_classes must be non-negative, got {self.num_classes}")
        bad = [i for i in self.insert_at if not 0 <= i <= self.depth]
        if bad:
            raise ConfigError(f"insert_at indices {bad} outside [0, {self.depth}]")
        try:
            object.__setattr__(self, "insert_module", InsertModule(self.insert_module))
        except ValueError:
            raise ConfigError(f"unknown insert_module {self.insert_module!r}") from None
        object.__setattr__(self, "insert_at", tuple(int(i) for i in self.insert_at))
        if self.layer_cfg is None:
            object.__setattr__(self, "layer_cfg", LayerConfig(embed_dim=self.embed_dim))
        elif self.layer_cfg.embed_dim != self.embed_dim:
            raise ConfigError("layer_cfg.embed_dim must equal embed_dim")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2


@dataclass
class TokenBatch:
    values: Tensor
    grid: PatchGrid
    has_cls: bool = True


@dataclass
class ModelOutput:
    logits: Optional[Tensor] = None
    embedding: Optional[Tensor] = None
    layer_outputs: List[LayerOutput] = field(default_factory=list)


class Block(Module):
    """Pre-norm attention + MLP block."""

    def __init__(self, cfg: BackboneConfig, rng: Rng) -> None:
        m = cfg.embed_dim
        self.norm1_gamma = parameter(np.ones(m))
        self.norm1_beta = parameter(np.zeros(m))
        self.qkv = Linear(m, 3 * m, rng.child("qkv"))
        self.proj = Linear(m, m, rng.child("proj"))
        self.norm2_gamma = parameter(np.ones(m))
        self.norm2_beta = parameter(np.zeros(m))
        self.fc1 = Linear(m, cfg.mlp_ratio * m, rng.child("fc1"))
        self.fc2 = Linear(cfg.mlp_ratio * m, m, rng.child("fc2"))


class BackboneParams(Module):
    def __init__(self, cfg: BackboneConfig, rng: Rng) -> None:
        m = cfg.embed_dim
        self.patch_proj = Linear(cfg.patch_size**2 * cfg.channels, m, rng.child("patch_proj"))
        self.pos_embed = parameter(rng.child("pos_embed").normal(0.0, 0.02, (cfg.num_patches, m)))
        self.cls_token = parameter(rng.child("cls_token").normal(0.0, 0.02, (1, m)))
        self.blocks = [Block(cfg, rng.child(f"block{i}")) for i in range(cfg.depth)]
        self.norm_gamma = parameter(np.ones(m))
        self.norm_beta = parameter(np.zeros(m))
        self.head = Linear(m, cfg.num_classes or m, rng.child("head"))


def patchify(image: Union[np.ndarray, Tensor], cfg: BackboneConfig, params: BackboneParams, grid: PatchGrid) -> TokenBatch:
    """Row-major patches [..., H, W, ch] -> CLS + projected patches + positional embedding."""
    pixels = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    size, p, ch = cfg.image_size, cfg.patch_size, cfg.channels
    if pixels.ndim < 3 or pixels.shape[-3:] != (size, size, ch):
        raise ShapeError(f"expected images of shape [..., {size}, {size}, {ch}], got {pixels.shape}")
    lead = pixels.shape[:-3]
    r = size // p
    blocks = pixels.reshape(lead + (r, p, r, p, ch))
    n = len(lead)
    blocks = np.transpose(blocks, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    patches = Tensor(blocks.reshape(lead + (r * r, p * p * ch)))
    tokens = params.patch_proj(patches) + params.pos_embed
    cls = T.broadcast_to(params.cls_token, lead + (1, cfg.embed_dim))
    return TokenBatch(values=T.concat([cls, tokens], axis=-2), grid=grid)


def attention(h: Tensor, block: Block, heads: int) -> Tuple[Tensor, Tensor]:
    """Multi-head self-attention over tokens [..., S, m]; returns (output, weights)."""
    lead, length, width = h.shape[:-2], h.shape[-2], h.shape[-1]
    head_dim = width // heads
    n = len(lead)
    qkv = T.reshape(block.qkv(h), lead + (length, 3, heads, head_dim))
    qkv = T.transpose(qkv, tuple(range(n)) + (n + 1, n + 2, n, n + 3))
    q, k, v = (qkv[(Ellipsis, i, slice(None), slice(None), slice(None))] for i in range(3))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(head_dim))
    weights = T.softmax(scores, axis=-1)
    out = T.transpose(T.matmul(weights, v), tuple(range(n)) + (n + 1, n, n + 2))
    return block.proj(T.reshape(out, lead + (length, width))), weights


def block_forward(x: Tensor, block: Block, heads: int) -> Tensor:
    x = x + attention(T.layer_norm(x, block.norm1_gamma, block.norm1_beta), block, heads)[0]
    h = T.layer_norm(x, block.norm2_gamma, block.norm2_beta)
    return x + block.fc2(T.relu(block.fc1(h)))


class VisionTransformer(Module):
    """Backbone plus one inserted module per entry of ``insert_at``."""

    def __init__(self, cfg: BackboneConfig, rng: Rng) -> None:
        assert cfg.layer_cfg is not None
        self.cfg = cfg
        self.grid = make_patch_grid(cfg.grid_size, cfg.grid_size, CameraIntrinsics(c=cfg.layer_cfg.focal))
        self.backbone = BackboneParams(cfg, rng.child("backbone"))
        if cfg.insert_module is InsertModule.TRL3D:
            self.trl3d = [LayerParams(cfg.layer_cfg, rng.child(f"trl3d.{k}")) for k in range(len(cfg.insert_at))]
        else:
            self.mlp = [MlpControl(cfg.layer_cfg, rng.child(f"mlp.{k}")) for k in range(len(cfg.insert_at))]

    def _insert(self, k: int, x: Tensor, clip: bool, outputs: List[LayerOutput]) -> Tensor:
        assert self.cfg.layer_cfg is not None
        if self.cfg.insert_module is InsertModule.MLP:
            return self.mlp[k](x)
        run = forward_video if clip else forward_image
        out = run(x, self.grid, self.cfg.layer_cfg, self.trl3d[k])
        outputs.append(out)
        return out.tokens

    def forward(self, images: Union[np.ndarray, Tensor], clip: bool = False) -> ModelOutput:
        """Images [..., H, W, ch]; with ``clip`` the axis before H is time."""
        cfg = self.cfg
        x = patchify(images, cfg, self.backbone, self.grid).values
        outputs: List[LayerOutput] = []
        for index in range(cfg.depth + 1):
            for k, location in enumerate(cfg.insert_at):
                if location == index:
                    x = self._insert(k, x, clip, outputs)
            if index < cfg.depth:
                x = block_forward(x, self.backbone.blocks[index], cfg.heads)

        cls = T.layer_norm(x[..., 0, :], self.backbone.norm_gamma, self.backbone.norm_beta)
        head = self.backbone.head(cls)
        if cfg.num_classes > 0:
            return ModelOutput(logits=head, layer_outputs=outputs)
        return ModelOutput(embedding=T.l2_normalize(head, axis=-1), layer_outputs=outputs)

    __call__ = forward
