"""
Class names and display colours, read from resources/palette.json.
"""

import json
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError

PALETTE_FILE = Path(__file__).parent / "resources" / "palette.json"


@lru_cache(maxsize=1)
def _palette_data() -> Dict:
    with open(PALETTE_FILE, "r") as f:
        return json.load(f)


def _color_table() -> Dict[str, List[int]]:
    return {entry["name"]: entry["color"] for entry in _palette_data()["classes"]}


def road_scene_names() -> List[str]:
    """The 19 road-scene categories in their conventional order."""
    return [entry["name"] for entry in _palette_data()["classes"]]


def synthetic_names(num_classes: int) -> List[str]:
    """Names for a synthetic scene with num_classes classes (road and sky first)."""
    order = list(_palette_data()["synthetic_order"])
    if num_classes < 2:
        raise ConfigurationError(f"synthetic scenes need at least 2 classes, got {num_classes}")
    return order[:num_classes] + [f"class {c}" for c in range(len(order), num_classes)]


def class_colors(names: Sequence[str]) -> np.ndarray:
    """(C, 3) uint8 colours; names without a fixed colour get a seeded random one."""
    table = _color_table()
    colors = np.zeros((len(names), 3), dtype=np.uint8)
    used = {tuple(c) for c in table.values()}
    for c, name in enumerate(names):
        if name in table:
            colors[c] = table[name]
            continue
        rng = np.random.default_rng(c)
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        while color in used:
            color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        used.add(color)
        colors[c] = color
    return colors


def colorize(labels: np.ndarray, colors: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    """Label map (H, W) -> RGB uint8 (H, W, 3); ignored or unknown pixels get the ignore colour."""
    labels = np.asarray(labels)
    out = np.empty(labels.shape + (3,), dtype=np.uint8)
    out[...] = _palette_data()["ignore_color"]
    known = (labels != ignore_index) & (labels >= 0) & (labels < len(colors))
    out[known] = colors[labels[known]]
    return out


def save_label_png(labels: np.ndarray, path: Path, colors: Optional[np.ndarray] = None, ignore_index: int = 255) -> None:
    """Write a label map as a colourised PNG, or as raw indices when colors is None."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if colors is None:
        Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)
    else:
        Image.fromarray(colorize(labels, colors, ignore_index)).save(path)
