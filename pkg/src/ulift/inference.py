"""Segmentation straight from trained features and codebook, no clustering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import compute_centroids, uncertainty_map
from .rasterizer import PixelWeightGrid, render_attribute, write_ppm
from .synthetic import write_mask

SENTINEL = -1
BACKGROUND_T = 0.5


@dataclass
class SegmentationMap:
    ids: np.ndarray  # (H, W) codebook row per pixel, SENTINEL for empty pixels

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def to_instance_mask(self) -> np.ndarray:
        """Shift to the mask-file convention: row + 1, 0 for empty pixels."""
        return np.where(self.ids == SENTINEL, 0, self.ids + 1).astype(np.int64)


def render_segmentation(features: np.ndarray, codebook: np.ndarray, weights: PixelWeightGrid) -> SegmentationMap:
    feats = render_attribute(weights, features).data.reshape(-1, features.shape[1])
    ids = np.argmax(feats @ codebook.T, axis=1)
    ids[weights.transmittance > BACKGROUND_T] = SENTINEL
    return SegmentationMap(ids.reshape(weights.height, weights.width))


def uncertainty_image(features: np.ndarray, weights: PixelWeightGrid, mask: np.ndarray) -> np.ndarray:
    """Per-pixel uncertainty of a whole labelled view; NaN on unlabelled pixels.

    Centroids come from every labelled pixel of the view rather than a sample.
    """
    flat = np.asarray(mask).reshape(-1)
    labelled = np.flatnonzero(flat > 0)
    out = np.full(flat.shape, np.nan)
    if labelled.size:
        feats = render_attribute(weights, features).data.reshape(-1, features.shape[1])[labelled]
        labels = flat[labelled]
        out[labelled] = uncertainty_map(feats, compute_centroids(feats, labels), labels)
    return out.reshape(np.asarray(mask).shape)


def assign_gaussian_ids(features: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(features) @ np.asarray(codebook).T, axis=1)


def palette(seed: int, n: int = 65536) -> np.ndarray:
    """Deterministic id -> RGB table; entry 0 (empty) is black."""
    rng = np.random.default_rng(seed)
    colors = rng.integers(40, 256, size=(n, 3), dtype=np.int64).astype(np.uint8)
    colors[0] = 0
    return colors


def colorize(mask: np.ndarray, seed: int = 0) -> np.ndarray:
    return palette(seed, int(mask.max()) + 1)[mask]


def export_segmentation(seg: SegmentationMap | np.ndarray, path: str | Path, palette_seed: int = 0) -> tuple[Path, Path]:
    """Write ``<path>.ulmk`` and ``<path>.ppm``; returns both paths."""
    mask = seg.to_instance_mask() if isinstance(seg, SegmentationMap) else np.asarray(seg)
    path = Path(path)
    raw = path.with_suffix(".ulmk")
    ppm = path.with_suffix(".ppm")
    write_mask(mask, raw)
    write_ppm(colorize(mask, palette_seed), ppm)
    return raw, ppm
