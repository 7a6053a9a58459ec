"""
Shared pytest fixtures.
"""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from vqseg.config import ModelConfig, RunConfig, VQConfig, build_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Two-stage float64 network with attention at 1/4 resolution; inputs must be multiples of 8."""
    return ModelConfig(
        num_classes=3,
        widths=[4, 8],
        strides=[2, 2],
        attention_stages=[1],
        expansion=2,
        heads=2,
        transformer_depth=1,
        mlp_ratio=2.0,
        bottleneck_dim=4,
        patch_size=(2, 2),
        dtype="float64",
        vq=VQConfig(K=5, d=4, beta=0.25, seed=0),
    )


@pytest.fixture
def tiny_run_config(tmp_path):
    """A run that trains for a handful of iterations on 16x16 synthetic scenes."""
    return build_config({
        "name": "tiny",
        "run_dir": str(tmp_path / "run"),
        "seed": 0,
        "model": {
            "num_classes": 4,
            "widths": [4, 8],
            "strides": [2, 2],
            "attention_stages": [1],
            "heads": 2,
            "bottleneck_dim": 4,
            "dtype": "float32",
            "vq": {"K": 6, "d": 4},
        },
        "data": {"kind": "synthetic", "num_train": 6, "num_val": 3, "image_size": 16},
        "augment": {"scale_range": [1.0, 1.0], "crop": [16, 16]},
        "train": {
            "lr0": 0.003,
            "max_iters": 2,
            "batch_size": 2,
            "eval_interval": 1,
            "checkpoint_interval": 1,
            "log_interval": 1,
        },
    })


def write_pair(root: Path, split: str, name: str, image: np.ndarray, labels: np.ndarray) -> None:
    (root / split / "images").mkdir(parents=True, exist_ok=True)
    (root / split / "labels").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.astype(np.uint8)).save(root / split / "images" / f"{name}.png")
    Image.fromarray(labels.astype(np.uint8)).save(root / split / "labels" / f"{name}.png")


@pytest.fixture
def folder_dataset(tmp_path, rng):
    """root/{train,val}/{images,labels} with three 8x12 pairs in train, one in val."""
    root = tmp_path / "dataset"
    for name in ("b_002", "a_001", "c_003"):
        image = rng.integers(0, 256, size=(8, 12, 3))
        labels = rng.integers(0, 3, size=(8, 12))
        labels[0, 0] = 255
        write_pair(root, "train", name, image, labels)
    write_pair(root, "val", "v_000", rng.integers(0, 256, size=(8, 12, 3)), rng.integers(0, 3, size=(8, 12)))
    return root
