from pathlib import Path
from typing import Any, Dict


def tiny_values(root: Path, **overrides: Any) -> Dict[str, str]:
    """A run config small enough for every command to finish in seconds."""
    values: Dict[str, Any] = {
        "seed": 5,
        "dataset": root / "synth",
        "image_size": 16,
        "patch_size": 4,
        "depth": 2,
        "heads": 2,
        "embed_dim": 8,
        "stem_hidden": 4,
        "insert_at": 1,
        "num_classes": 2,
        "points_per_scene": 40,
        "train_per_class": 2,
        "test_per_class": 1,
        "seen_cameras": 2,
        "unseen_cameras": 2,
        "frames": 8,
        "positive_window": 1,
        "align_train_pairs": 2,
        "align_test_pairs": 2,
        "steps": 2,
        "batch": 2,
        "snapshots": "0,50,100",
        "ablation_seeds": 0,
        "gradcheck_samples": 2,
    }
    values.update(overrides)
    return {key: str(value) for key, value in values.items()}


def write_config(path: Path, values: Dict[str, str]) -> Path:
    path.write_text("".join(f"{key}={value}\n" for key, value in values.items()), encoding="utf-8")
    return path
