"""Structured block masks: seed-rate calibration, seed sampling, block expansion.

All samplers accept either a single (h, w) map or a batch (N, h, w); each
image in a batch draws its own seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

RR_SM = "rr_sm"
UNIFORM = "uniform"
MODES = (RR_SM, UNIFORM)


@dataclass(frozen=True)
class MaskGenConfig:
    keep_prob: float = 0.9
    block_size: int = 3
    mode: str = RR_SM

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise ValueError(f"keep_prob must be in (0,1], got {self.keep_prob}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError(f"block_size must be a positive odd integer, got {self.block_size}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def calibrate_gamma(keep_prob: float, block_size: int, h: int, w: int) -> float:
    """Seed probability such that expanded blocks cover about ``1 - keep_prob``."""
    if h < block_size or w < block_size:
        raise ValueError(f"block_size {block_size} does not fit a {h}x{w} map")
    if keep_prob >= 1:
        return 0.0
    return ((1 - keep_prob) / block_size**2) * (h * w) / ((h - block_size + 1) * (w - block_size + 1))


def fit_block_size(block_size: int, h: int, w: int) -> int:
    """Largest odd block size not exceeding ``block_size`` that fits h×w."""
    bs = min(block_size, h, w)
    return bs if bs % 2 else bs - 1


def valid_region(h: int, w: int, block_size: int) -> np.ndarray:
    """Boolean (h, w) map of positions whose full block fits inside the map."""
    half = block_size // 2
    valid = np.zeros((h, w), dtype=bool)
    valid[half : h - half, half : w - half] = True
    return valid


def rrsm_probabilities(attention: np.ndarray, gamma: float, block_size: int) -> np.ndarray:
    """Per-position seed probabilities proportional to attention.

    Scaled so the mean probability over the valid region is ``gamma``
    (before clipping to 1). Invalid positions and all-zero maps get 0.
    """
    att = np.maximum(np.asarray(attention, dtype=np.float64), 0)
    valid = valid_region(att.shape[-2], att.shape[-1], block_size)
    att = np.where(valid, att, 0.0)
    total = att.sum(axis=(-2, -1), keepdims=True)
    n_valid = valid.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(total > 0, gamma * att * n_valid / total, 0.0)
    return np.clip(p, 0.0, 1.0)


def sample_seeds_rrsm(attention: np.ndarray, gamma: float, rng: np.random.Generator,
                      block_size: int = 3) -> np.ndarray:
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    p = rrsm_probabilities(attention, gamma, block_size)
    return (rng.random(p.shape) < p).astype(np.float32)


def sample_seeds_uniform(gamma: float, h: int, w: int, rng: np.random.Generator,
                         block_size: int = 3, n: int | None = None) -> np.ndarray:
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must be in [0,1], got {gamma}")
    shape = (h, w) if n is None else (n, h, w)
    draws = rng.random(shape) < gamma
    return (draws & valid_region(h, w, block_size)).astype(np.float32)


def expand_seeds(seeds: np.ndarray, block_size: int) -> np.ndarray:
    """Keep-mask with a block_size square of zeros centred on every seed."""
    seeds = np.asarray(seeds)
    half = block_size // 2
    lead = ((0, 0),) * (seeds.ndim - 2)
    padded = np.pad(seeds, lead + ((half, half), (half, half)))
    covered = sliding_window_view(padded, (block_size, block_size), axis=(-2, -1)).max(axis=(-2, -1))
    return (1 - covered).astype(np.float32)


def sample_block_mask(
    shape: tuple[int, int],
    config: MaskGenConfig,
    rng: np.random.Generator,
    attention: np.ndarray | None = None,
    n: int | None = None,
) -> np.ndarray:
    """Full pipeline: gamma, seeds (per ``config.mode``), expansion.

    ``attention`` is required for rr_sm; its leading axes set the batch size.
    Maps smaller than the block shrink the block to the largest odd size
    that fits.
    """
    h, w = shape
    bs = fit_block_size(config.block_size, h, w)
    gamma = calibrate_gamma(config.keep_prob, bs, h, w)
    if config.mode == RR_SM:
        if attention is None:
            raise ValueError("rr_sm sampling needs an attention map")
        seeds = sample_seeds_rrsm(attention, gamma, rng, bs)
    else:
        if n is None and attention is not None and attention.ndim == 3:
            n = attention.shape[0]
        seeds = sample_seeds_uniform(gamma, h, w, rng, bs, n)
    return expand_seeds(seeds, bs)
