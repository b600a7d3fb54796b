"""Class activation maps, target-class drop masks and PGM heatmaps.

Everything here runs outside gradient tracking: the maps only decide *where*
replacement happens, never contribute to the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError, upsample_nearest


@dataclass(frozen=True)
class AttentionMap:
    """Non-negative spatial attention of one image w.r.t. ``source_label``."""

    values: np.ndarray
    source_label: int

    def __post_init__(self):
        v = np.maximum(np.asarray(self.values, dtype=np.float32), 0)
        if v.ndim != 2:
            raise ShapeError(f"attention map must be 2D, got {v.shape}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class BinaryMask:
    """Spatial {0,1} grid, 1 = keep, 0 = drop/replace."""

    values: np.ndarray
    resolution: str = "feature"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("binary mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", v)


def cam_batch(features: np.ndarray, classifier_weights: np.ndarray, labels) -> np.ndarray:
    """Clamped CAMs for a batch as an (N, h, w) float32 array."""
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 4:
        raise ShapeError(f"features must be (N,C,h,w), got {features.shape}")
    num_classes, c = classifier_weights.shape
    if features.shape[1] != c:
        raise ShapeError(f"features have {features.shape[1]} channels, classifier expects {c}")
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"need one label per image, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    w = classifier_weights[labels]  # (N, C)
    raw = np.einsum("nc,nchw->nhw", w, features)
    return np.maximum(raw, 0).astype(np.float32, copy=False)


def compute_cam(features: np.ndarray, classifier_weights: np.ndarray, labels) -> list[AttentionMap]:
    maps = cam_batch(features, classifier_weights, labels)
    return [AttentionMap(m, int(lbl)) for m, lbl in zip(maps, np.asarray(labels))]


def tcdm_batch(maps: np.ndarray, threshold_ratio: float) -> np.ndarray:
    """Threshold (..., h, w) attention into keep-masks: 0 where above ratio·max."""
    if not 0 < threshold_ratio < 1:
        raise ValueError(f"threshold_ratio must be in (0,1), got {threshold_ratio}")
    peak = maps.max(axis=(-2, -1), keepdims=True)
    drop = maps > threshold_ratio * peak
    # an all-zero map has peak 0 and nothing strictly above 0, so it keeps everything
    return (~drop).astype(np.float32)


def threshold_to_tcdm(m: AttentionMap, threshold_ratio: float) -> BinaryMask:
    return BinaryMask(tcdm_batch(m.values, threshold_ratio), "feature")


def tcdm_to_image_mask(mask: BinaryMask, img_h: int, img_w: int) -> BinaryMask:
    return BinaryMask(upsample_nearest(mask.values, img_h, img_w), "image")


def heatmap_bytes(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise ShapeError(f"heatmap needs a nonempty 2D map, got {v.shape}")
    lo, hi = v.min(), v.max()
    if hi > lo:
        pix = np.round((v - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(v)
    h, w = v.shape
    return f"P5 {w} {h} 255\n".encode("ascii") + pix.astype(np.uint8).tobytes()


def export_heatmap(m: AttentionMap | np.ndarray, path) -> Path:
    """Write an 8-bit binary PGM, min-max scaled; a constant map becomes all 0."""
    values = m.values if isinstance(m, AttentionMap) else m
    path = Path(path)
    try:
        path.write_bytes(heatmap_bytes(values))
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, _, body = raw.partition(b"\n")
    magic, w, h, maxval = header.split()
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(int(h), int(w))
