"""
Experiment settings read from a flat ``key=value`` file.

Only the file and the command-line overrides count; environment variables
are not consulted.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from decouple import Csv, RepositoryEnv

from .backbone import BackboneConfig
from .exceptions import ConfigError
from .layer import LayerConfig
from .losses import TcnConfig
from .optim import OPTIMIZERS
from .synthdata import GenerationConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = "data/synth"
    out: str = "runs"

    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    focal: float = 1.0

    num_classes: int = 4
    points_per_scene: int = 160
    train_per_class: int = 12
    test_per_class: int = 6
    seen_cameras: int = 6
    unseen_cameras: int = 4
    camera_distance: float = 4.0

    align_train_pairs: int = 8
    align_test_pairs: int = 4
    frames: int = 24
    camera_sweep_deg: float = 60.0

    depth: int = 6
    heads: int = 3
    embed_dim: int = 48
    mlp_ratio: int = 2
    insert_at: Tuple[int, ...] = (2,)
    insert_module: str = "trl3d"
    coord_mode: str = "depth"
    fusion_mode: str = "embedding"
    video_strategy: str = "DT"
    stem_hidden: int = 32

    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0
    align_optimizer: str = "adam"
    align_lr: float = 0.001
    steps: int = 200
    batch: int = 16

    positive_window: int = 3
    margin: float = 0.2
    negatives_per_anchor: int = 1

    checkpoint: Tuple[str, ...] = field(default_factory=tuple)
    snapshots: Tuple[int, ...] = (0, 50, 100)
    gradcheck_samples: int = 8
    ablation_seeds: Tuple[int, ...] = (0, 1, 2)
    random_baseline_draws: int = 1

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError(f"steps must be >= 0 and batch >= 1, got steps={self.steps} batch={self.batch}")
        if self.clip_norm < 0.0:
            raise ConfigError(f"clip_norm must be >= 0 (0 disables clipping), got {self.clip_norm}")
        if self.gradcheck_samples < 0:
            raise ConfigError(f"gradcheck_samples must be >= 0 (0 checks every entry), got {self.gradcheck_samples}")
        if self.align_optimizer not in OPTIMIZERS:
            raise ConfigError(f"align_optimizer must be one of {', '.join(OPTIMIZERS)}, got {self.align_optimizer!r}")
        bad = [s for s in self.snapshots if not 0 <= s <= 100]
        if bad:
            raise ConfigError(f"snapshots are percentages of training, got {bad}")

    def resolved(self) -> Dict[str, Any]:
        """Every key with its effective value, JSON-friendly."""
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    def layer_config(self) -> LayerConfig:
        return LayerConfig(
            embed_dim=self.embed_dim,
            focal=self.focal,
            coord_mode=self.coord_mode,  # type: ignore[arg-type]
            fusion_mode=self.fusion_mode,  # type: ignore[arg-type]
            video_strategy=self.video_strategy,  # type: ignore[arg-type]
            stem_hidden=self.stem_hidden,
        )

    def backbone_config(self, num_classes: Optional[int] = None) -> BackboneConfig:
        """Classification head by default; ``num_classes=0`` gives the embedding head."""
        return BackboneConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels=self.channels,
            depth=self.depth,
            heads=self.heads,
            embed_dim=self.embed_dim,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes if num_classes is None else num_classes,
            insert_at=self.insert_at,
            insert_module=self.insert_module,  # type: ignore[arg-type]
            layer_cfg=self.layer_config(),
        )

    def tcn_config(self) -> TcnConfig:
        return TcnConfig(
            positive_window=self.positive_window, margin=self.margin, negatives_per_anchor=self.negatives_per_anchor
        )

    def generation_config(self) -> GenerationConfig:
        names = {f.name for f in fields(GenerationConfig)}
        return GenerationConfig(**{name: getattr(self, name) for name in names})


def _int_list(value: str) -> Tuple[int, ...]:
    return tuple(Csv(int)(value))


def _str_list(value: str) -> Tuple[str, ...]:
    return tuple(Csv()(value))


def _caster(kind: Any) -> Callable[[str], Any]:
    if kind == Tuple[int, ...]:
        return _int_list
    if kind == Tuple[str, ...]:
        return _str_list
    return kind  # type: ignore[no-any-return]


CASTS: Dict[str, Callable[[str], Any]] = {f.name: _caster(f.type) for f in fields(RunConfig)}


def parse_run_config(values: Dict[str, str]) -> RunConfig:
    unknown = sorted(set(values) - set(CASTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    parsed: Dict[str, Any] = {}
    for key, raw in values.items():
        try:
            parsed[key] = CASTS[key](raw)
        except ValueError:
            raise ConfigError(f"malformed value for {key}: {raw!r}") from None
    return RunConfig(**parsed)


def _check_lines(path: PathLike) -> None:
    """Every line that is not blank or a ``#`` comment must be ``key=value``."""
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#") and "=" not in stripped:
            raise ConfigError(f"malformed line {number}: {stripped!r} is not key=value")


def load_run_config(path: Optional[PathLike] = None, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Read ``path`` (defaults only when None) and apply the ``--seed``/``--out`` overrides."""
    values: Dict[str, str] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            _check_lines(path)
            values = dict(RepositoryEnv(str(path)).data)
        except UnicodeDecodeError as e:
            raise ConfigError(f"config file {path} is not UTF-8 text") from e
    config = parse_run_config(values)
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = out
    config = replace(config, **overrides) if overrides else config
    logger.debug(f"Resolved run config from {path or 'defaults'}: seed={config.seed}, out={config.out}")
    return config


def from_resolved(values: Dict[str, Any]) -> RunConfig:
    """Rebuild a RunConfig from the dict a manifest or ExperimentRun row recorded."""
    text = {
        key: ",".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)
        for key, value in values.items()
    }
    return parse_run_config(text)
