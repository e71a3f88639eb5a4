"""Feature-map grid export.

Each cascade layer becomes one grayscale PNG: one row per feature level
(the inherited low-level channels first, then each generation of appended
channels), maps laid out left to right and separated by 1-pixel white lines.
"""
from __future__ import annotations

import os
from typing import List, Sequence

import numpy as np
from PIL import Image

from .cascade import FeatureState

__all__ = ["rescale_map", "feature_grid", "export_feature_maps"]

SEPARATOR = 255
MID_GRAY = 128


def rescale_map(m: np.ndarray) -> np.ndarray:
    """Min-max rescale one map to 0..255; constant maps become mid-gray."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.full(m.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((m - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def feature_grid(maps: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    """Arrange ``C x H x W`` maps into rows split at the ``levels`` offsets."""
    c, h, w = maps.shape
    bounds = [0] + list(levels)
    if bounds[-1] != c:
        raise ValueError(f"level boundaries {levels} do not end at {c} channels")
    rows = [list(range(bounds[i], bounds[i + 1])) for i in range(len(bounds) - 1)]
    cols = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + 1) + 1, cols * (w + 1) + 1), SEPARATOR, dtype=np.uint8)
    for r, chans in enumerate(rows):
        for j, ch in enumerate(chans):
            y, x = 1 + r * (h + 1), 1 + j * (w + 1)
            grid[y:y + h, x:x + w] = rescale_map(maps[ch])
    return grid


def export_feature_maps(states: List[FeatureState], outdir: str, sample: int = 0,
                        prefix: str = "layer") -> List[str]:
    """Write one grid per feature state; returns the written paths.

    Pass the stem state first so grid ``k`` shows ``k`` feature levels.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for i, st in enumerate(states, start=1):
        grid = feature_grid(st.features.data[sample], st.levels)
        path = os.path.join(outdir, f"{prefix}{i:02d}.png")
        Image.fromarray(grid, mode="L").save(path, format="PNG")
        paths.append(path)
    return paths
