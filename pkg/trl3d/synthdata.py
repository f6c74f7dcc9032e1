"""
Deterministic synthetic multi-view worlds.

Scenes are small labelled point clouds (line, ring, cross, blob pair) in a
random orientation. Views are rendered by splatting points through a pinhole
camera, which keeps the per-patch ground-truth depth exact. Alignment pairs
animate one scene along a scripted path and film it with a static camera A
and a camera B sweeping around the scene, frame-synchronised.

A dataset on disk is a ``manifest.json`` plus one binary container per split
(same container format as model checkpoints), each checked by sha256.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import decode_container, write_container
from .exceptions import CheckpointError, DatasetError, GeometryError
from .geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    Point3,
    euler_to_rotation,
    look_at,
    project_points,
    world_to_camera,
)
from .tensor import Rng

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLIT_KEYS = ("kind", "samples", "blob", "sha256")

SHAPE_CATALOG = ("line", "ring", "cross", "blob_pair")
RING_RADIUS = 1.2
JITTER = 0.05
SEEN_ELEVATION_DEG = 25.0
UNSEEN_ELEVATION_DEG = 45.0
MIN_VISIBLE_FRACTION = 0.5

CLASSIFICATION_SPLITS = ("train", "test", "test_unseen")
ALIGNMENT_SPLITS = ("align_train", "align_seen", "align_unseen")

PathLike = Union[str, Path]


@dataclass
class Scene:
    class_id: int
    points: np.ndarray = field(repr=False)
    intensities: np.ndarray = field(repr=False)
    extent: float = 0.0

    def as_points(self) -> List[Point3]:
        return [Point3.from_array(p) for p in self.points]


@dataclass
class ViewSample:
    image: np.ndarray = field(repr=False)
    gt_depth: np.ndarray = field(repr=False)
    extrinsics: CameraExtrinsics
    class_id: int


@dataclass(frozen=True)
class GenerationConfig:
    image_size: int = 32
    patch_size: int = 4
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
    positive_window: int = 3

    def __post_init__(self) -> None:
        if not 1 <= self.num_classes <= len(SHAPE_CATALOG):
            raise DatasetError(f"num_classes must be in [1, {len(SHAPE_CATALOG)}], got {self.num_classes}")
        if self.image_size % self.patch_size:
            raise DatasetError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.test_per_class > self.train_per_class:
            raise DatasetError("test_per_class cannot exceed train_per_class (held-out views reuse train scenes)")
        if self.frames < 2 * self.positive_window + 2:
            raise DatasetError(f"frames={self.frames} is shorter than 2*positive_window+2")
        if self.seen_cameras < 2 or self.unseen_cameras < 2:
            raise DatasetError("each camera pool needs at least 2 cameras")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(c=self.focal)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class ViewSet:
    """Rendered views with any leading sample axes: [n] or [pairs, frames]."""

    images: np.ndarray
    gt_depth: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def to_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}{f.name}": np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], prefix: str = "") -> "ViewSet":
        try:
            values = {name: arrays[f"{prefix}{name}"] for name in ("images", "gt_depth", "rotations", "translations", "labels")}
        except KeyError as e:
            raise DatasetError(f"corrupt payload: missing array {e}") from e
        values["labels"] = values["labels"].astype(np.int64)
        return cls(**values)

    @classmethod
    def from_samples(cls, samples: Sequence[ViewSample]) -> "ViewSet":
        return cls(
            images=np.stack([s.image for s in samples]),
            gt_depth=np.stack([s.gt_depth for s in samples]),
            rotations=np.stack([s.extrinsics.R for s in samples]),
            translations=np.stack([s.extrinsics.t for s in samples]),
            labels=np.array([s.class_id for s in samples], dtype=np.int64),
        )

    def extrinsics(self, index: Tuple[int, ...]) -> CameraExtrinsics:
        return CameraExtrinsics(R=self.rotations[index], t=self.translations[index])


@dataclass
class PairSet:
    view_a: ViewSet
    view_b: ViewSet

    def __len__(self) -> int:
        return len(self.view_a)


@dataclass
class Dataset:
    seed: int
    generation: GenerationConfig
    classification: Dict[str, ViewSet] = field(default_factory=dict)
    alignment: Dict[str, PairSet] = field(default_factory=dict)
    cameras: Dict[str, List[List[float]]] = field(default_factory=dict)


@dataclass(frozen=True)
class SceneScript:
    """Scripted motion: the scene spins about the world z axis while drifting along a path."""

    scene: Scene
    spin_deg: float
    path_start: Tuple[float, float, float]
    path_end: Tuple[float, float, float]
    lift: float = 0.3

    def world_points(self, t: int, frames: int) -> np.ndarray:
        s = t / max(frames - 1, 1)
        spin = euler_to_rotation(np.array([np.radians(self.spin_deg) * s, 0.0, 0.0]))
        start, end = np.asarray(self.path_start), np.asarray(self.path_end)
        offset = start + (end - start) * s + np.array([0.0, 0.0, self.lift * np.sin(np.pi * s)])
        return self.scene.points @ spin.T + offset


def _shape_points(shape: str, n: int, rng: Rng) -> np.ndarray:
    jitter = rng.uniform(-JITTER, JITTER, (n, 3))
    if shape == "line":
        points = np.stack([rng.uniform(-1.5, 1.5, n), np.zeros(n), np.zeros(n)], axis=1) + jitter
    elif shape == "ring":
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        radius = RING_RADIUS + jitter[:, 0]
        points = np.stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros(n)], axis=1)
    elif shape == "cross":
        along = rng.uniform(-1.2, 1.2, n)
        on_x = np.arange(n) % 2 == 0
        points = np.stack([np.where(on_x, along, 0.0), np.where(on_x, 0.0, along), np.zeros(n)], axis=1) + jitter
    else:
        offsets = rng.normal(0.0, 0.2, (n, 3))
        norms = np.linalg.norm(offsets, axis=1, keepdims=True)
        offsets = np.where(norms > 0.6, offsets * (0.6 / np.maximum(norms, 1e-12)), offsets)
        centres = np.where((np.arange(n) % 2 == 0)[:, None], [[1.0, 0.0, 0.0]], [[-1.0, 0.0, 0.0]])
        points = centres + offsets
    return points


def generate_scene(class_id: int, rng: Rng, num_points: int = 160) -> Scene:
    if not 0 <= class_id < len(SHAPE_CATALOG):
        raise DatasetError(f"unknown class id {class_id}; catalog has {len(SHAPE_CATALOG)} shapes")
    if num_points < 1:
        raise DatasetError(f"a scene needs at least one point, got {num_points}")
    points = _shape_points(SHAPE_CATALOG[class_id], num_points, rng.child("shape"))
    orientation = euler_to_rotation(rng.child("pose").uniform(-np.pi, np.pi, 3))
    points = points @ orientation.T
    intensities = rng.child("intensity").uniform(0.5, 1.0, num_points)
    extent = float(np.max(np.linalg.norm(points, axis=1)))
    return Scene(class_id=class_id, points=points, intensities=intensities, extent=extent)


def render_points(
    points: np.ndarray,
    intensities: np.ndarray,
    ext: CameraExtrinsics,
    k: CameraIntrinsics,
    height: int,
    width: int,
    patch: int,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Splat world points into an image [H, W, 1] and per-patch mean depth; returns the visible fraction too."""
    camera = world_to_camera(points, ext)
    visible = camera[:, 2] > 0.0
    if not np.any(visible):
        raise GeometryError("all points are behind the camera")
    u, v = project_points(camera[visible], k)
    longer = max(height, width)
    cols = np.floor((u * longer + width) / 2.0).astype(np.int64)
    rows = np.floor((v * longer + height) / 2.0).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    rows, cols = rows[inside], cols[inside]
    depth = camera[visible, 2][inside]

    image = np.zeros((height, width))
    np.add.at(image, (rows, cols), intensities[visible][inside])

    grid_rows, grid_cols = height // patch, width // patch
    depth_sum = np.zeros((grid_rows, grid_cols))
    depth_count = np.zeros((grid_rows, grid_cols))
    np.add.at(depth_sum, (rows // patch, cols // patch), depth)
    np.add.at(depth_count, (rows // patch, cols // patch), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        gt_depth = np.where(depth_count > 0, depth_sum / np.maximum(depth_count, 1.0), np.inf)
    return image[..., None], gt_depth, float(np.mean(visible))


def render_view(
    scene: Scene, ext: CameraExtrinsics, k: CameraIntrinsics, height: int, width: int, patch: int
) -> ViewSample:
    image, gt_depth, visible = render_points(scene.points, scene.intensities, ext, k, height, width, patch)
    if visible < MIN_VISIBLE_FRACTION:
        logger.warning(f"Only {visible:.0%} of the scene is in front of the camera")
    return ViewSample(image=image, gt_depth=gt_depth, extrinsics=ext, class_id=scene.class_id)


def camera_ring(count: int, distance: float, elevation_deg: float, phase: float = 0.0) -> List[CameraExtrinsics]:
    """``count`` cameras evenly spaced in azimuth, all looking at the origin."""
    return [orbit_camera(2.0 * np.pi * (i + phase) / count, elevation_deg, distance) for i in range(count)]


def orbit_camera(azimuth: float, elevation_deg: float, distance: float) -> CameraExtrinsics:
    elevation = np.radians(elevation_deg)
    centre = distance * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    return look_at(centre)


def seen_cameras(cfg: GenerationConfig) -> List[CameraExtrinsics]:
    return camera_ring(cfg.seen_cameras, cfg.camera_distance, SEEN_ELEVATION_DEG)


def unseen_cameras(cfg: GenerationConfig) -> List[CameraExtrinsics]:
    # half-step azimuth offset and a steeper elevation keep the pools disjoint
    return camera_ring(cfg.unseen_cameras, cfg.camera_distance, UNSEEN_ELEVATION_DEG, phase=0.5)


def camera_sweep(
    start_azimuth: float, elevation_deg: float, distance: float, sweep_deg: float, frames: int
) -> List[CameraExtrinsics]:
    steps = np.linspace(0.0, np.radians(sweep_deg), frames)
    return [orbit_camera(start_azimuth + step, elevation_deg, distance) for step in steps]


def generate_alignment_pair(
    script: SceneScript,
    cam_a: CameraExtrinsics,
    cam_b_trajectory: Sequence[CameraExtrinsics],
    frames: int,
    k: CameraIntrinsics,
    image_size: int,
    patch: int,
) -> Tuple[List[ViewSample], List[ViewSample]]:
    """Render the scripted scene from static camera A and moving camera B, frame by frame."""
    if len(cam_b_trajectory) != frames:
        raise DatasetError(f"camera B trajectory has {len(cam_b_trajectory)} poses for {frames} frames")
    view_a: List[ViewSample] = []
    view_b: List[ViewSample] = []
    for t in range(frames):
        points = script.world_points(t, frames)
        for camera, out in ((cam_a, view_a), (cam_b_trajectory[t], view_b)):
            image, gt_depth, visible = render_points(
                points, script.scene.intensities, camera, k, image_size, image_size, patch
            )
            if visible < MIN_VISIBLE_FRACTION:
                raise GeometryError(f"frame {t}: only {visible:.0%} of the scene is in front of the camera")
            out.append(ViewSample(image=image, gt_depth=gt_depth, extrinsics=camera, class_id=script.scene.class_id))
    return view_a, view_b


def _script_for(scene: Scene, rng: Rng) -> SceneScript:
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    return SceneScript(
        scene=scene,
        spin_deg=float(sign * rng.uniform(90.0, 180.0)),
        path_start=(-0.8, float(rng.uniform(-0.3, 0.3)), 0.0),
        path_end=(0.8, float(rng.uniform(-0.3, 0.3)), 0.0),
    )


def _classification_split(
    cfg: GenerationConfig,
    rng: Rng,
    scene_stream: str,
    camera_stream: str,
    per_class: int,
    cameras: Sequence[CameraExtrinsics],
) -> ViewSet:
    samples = []
    for class_id in range(cfg.num_classes):
        for index in range(per_class):
            scene = generate_scene(class_id, rng.child(scene_stream).child(class_id).child(index), cfg.points_per_scene)
            pick = rng.child(camera_stream).child(class_id).child(index)
            camera = cameras[int(pick.integers(0, len(cameras)))]
            samples.append(render_view(scene, camera, cfg.intrinsics, cfg.image_size, cfg.image_size, cfg.patch_size))
    return ViewSet.from_samples(samples)


def _alignment_split(cfg: GenerationConfig, rng: Rng, pairs: int, unseen: bool) -> PairSet:
    count = cfg.unseen_cameras if unseen else cfg.seen_cameras
    elevation = UNSEEN_ELEVATION_DEG if unseen else SEEN_ELEVATION_DEG
    phase = 0.5 if unseen else 0.0
    pool = camera_ring(count, cfg.camera_distance, elevation, phase)
    views_a: List[ViewSet] = []
    views_b: List[ViewSet] = []
    for index in range(pairs):
        pair_rng = rng.child(index)
        scene = generate_scene(index % cfg.num_classes, pair_rng.child("scene"), cfg.points_per_scene)
        slots = pair_rng.child("cameras").choice(count, size=2, replace=False)
        start = 2.0 * np.pi * (int(slots[1]) + phase) / count
        trajectory = camera_sweep(start, elevation, cfg.camera_distance, cfg.camera_sweep_deg, cfg.frames)
        view_a, view_b = generate_alignment_pair(
            _script_for(scene, pair_rng.child("script")),
            pool[int(slots[0])],
            trajectory,
            cfg.frames,
            cfg.intrinsics,
            cfg.image_size,
            cfg.patch_size,
        )
        views_a.append(ViewSet.from_samples(view_a))
        views_b.append(ViewSet.from_samples(view_b))

    def stacked(views: List[ViewSet]) -> ViewSet:
        return ViewSet(**{f.name: np.stack([getattr(v, f.name) for v in views]) for f in fields(ViewSet)})

    return PairSet(view_a=stacked(views_a), view_b=stacked(views_b))


def generate_dataset(cfg: GenerationConfig, seed: int) -> Dataset:
    """Every split is a pure function of (cfg, seed)."""
    rng = Rng(seed).child("dataset")
    seen, unseen = seen_cameras(cfg), unseen_cameras(cfg)
    logger.info(f"Generating synthetic dataset (seed={seed}, classes={cfg.num_classes}, frames={cfg.frames})")
    dataset = Dataset(seed=seed, generation=cfg)
    dataset.classification["train"] = _classification_split(cfg, rng, "train", "train.camera", cfg.train_per_class, seen)
    dataset.classification["test"] = _classification_split(cfg, rng, "test", "test.camera", cfg.test_per_class, seen)
    # same scene stream as train, held-out cameras only
    dataset.classification["test_unseen"] = _classification_split(cfg, rng, "train", "test_unseen.camera", cfg.test_per_class, unseen)
    if cfg.align_train_pairs:
        dataset.alignment["align_train"] = _alignment_split(cfg, rng.child("align_train"), cfg.align_train_pairs, False)
    if cfg.align_test_pairs:
        dataset.alignment["align_seen"] = _alignment_split(cfg, rng.child("align_seen"), cfg.align_test_pairs, False)
        dataset.alignment["align_unseen"] = _alignment_split(cfg, rng.child("align_unseen"), cfg.align_test_pairs, True)
    dataset.cameras = {
        "seen": [c.center.tolist() for c in seen],
        "unseen": [c.center.tolist() for c in unseen],
    }
    return dataset


def save_dataset(dataset: Dataset, path: PathLike) -> Dict[str, Any]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    splits: Dict[str, Dict[str, Any]] = {}
    for name, views in dataset.classification.items():
        digest = write_container(root / f"{name}.bin", views.to_arrays())
        splits[name] = {"kind": "classification", "samples": len(views), "blob": f"{name}.bin", "sha256": digest}
    for name, pairs in dataset.alignment.items():
        arrays = {**pairs.view_a.to_arrays("a."), **pairs.view_b.to_arrays("b.")}
        digest = write_container(root / f"{name}.bin", arrays)
        splits[name] = {"kind": "alignment", "samples": len(pairs), "blob": f"{name}.bin", "sha256": digest}

    manifest = {
        "format_version": DATASET_VERSION,
        "seed": dataset.seed,
        "classes": list(SHAPE_CATALOG[: dataset.generation.num_classes]),
        "generation": asdict(dataset.generation),
        "cameras": dataset.cameras,
        "splits": splits,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Saved dataset with splits {sorted(splits)} to {root}")
    return manifest


def read_manifest(path: PathLike) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"no dataset at {path} (missing {MANIFEST_NAME})")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"corrupt manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict) or any(key not in manifest for key in ("seed", "generation", "splits")):
        raise DatasetError(f"corrupt manifest {manifest_path}: missing keys")
    if not isinstance(manifest["splits"], dict):
        raise DatasetError(f"corrupt manifest {manifest_path}: splits must be a mapping")
    if manifest.get("format_version") != DATASET_VERSION:
        raise DatasetError(
            f"dataset version {manifest.get('format_version')} does not match supported version {DATASET_VERSION}"
        )
    return manifest


def _read_blob(root: Path, entry: Dict[str, Any]) -> Dict[str, np.ndarray]:
    blob = root / entry["blob"]
    try:
        payload = blob.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"missing blob {blob}") from e
    if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
        raise DatasetError(f"corrupt payload: {blob.name} fails its sha256 check")
    try:
        return decode_container(payload)
    except CheckpointError as e:
        raise DatasetError(str(e)) from e


def load_dataset(path: PathLike, splits: Optional[Sequence[str]] = None) -> Dataset:
    root = Path(path)
    manifest = read_manifest(root)
    try:
        generation = GenerationConfig(**manifest["generation"])
    except TypeError as e:
        raise DatasetError(f"corrupt manifest: {e}") from e
    dataset = Dataset(seed=int(manifest["seed"]), generation=generation, cameras=manifest.get("cameras", {}))
    for name, entry in sorted(manifest["splits"].items()):
        if splits is not None and name not in splits:
            continue
        absent = [key for key in SPLIT_KEYS if key not in entry] if isinstance(entry, dict) else list(SPLIT_KEYS)
        if absent:
            raise DatasetError(f"corrupt manifest: split {name} is missing {', '.join(absent)}")
        arrays = _read_blob(root, entry)
        if entry["kind"] == "classification":
            views = ViewSet.from_arrays(arrays)
            loaded = len(views)
            dataset.classification[name] = views
        else:
            pairs = PairSet(view_a=ViewSet.from_arrays(arrays, "a."), view_b=ViewSet.from_arrays(arrays, "b."))
            loaded = len(pairs)
            dataset.alignment[name] = pairs
        if loaded != entry["samples"]:
            raise DatasetError(f"split {name}: manifest lists {entry['samples']} samples, blob holds {loaded}")
    missing = [name for name in (splits or ()) if name not in manifest["splits"]]
    if missing:
        raise DatasetError(f"dataset at {root} has no split(s) {missing}")
    logger.info(f"Loaded dataset from {root}: {sorted(dataset.classification) + sorted(dataset.alignment)}")
    return dataset
