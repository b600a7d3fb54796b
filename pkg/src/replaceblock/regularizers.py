"""ReplaceBlock and the baseline regularizers it is compared against.

Feature-level regularizers act at the MiniCNN hook points and are all of
the form ``out = f * multiplier + constant``; the training loop only needs
the multiplier to backpropagate. Cutout acts on the input image instead.
None of them do anything outside training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import cam, masks
from .model import HOOKS, MiniCNN
from .tensor import ShapeError, elementwise_mul, resample_nearest

ALL_TIME = "all_time"
ALTERNATE = "alternate"
SCHEDULES = (ALL_TIME, ALTERNATE)


# -- elementary operations ------------------------------------------------


def spatial_shuffle(f: np.ndarray, rng: np.random.Generator, return_permutation: bool = False):
    """Permute spatial positions per image, identically for every channel.

    ``out[n, :, p] = f[n, :, perm[n][p]]`` over flattened positions ``p``.
    """
    n, c, h, w = f.shape
    perms = np.stack([rng.permutation(h * w) for _ in range(n)]) if n else np.zeros((0, h * w), int)
    flat = f.reshape(n, c, h * w)
    out = np.take_along_axis(flat, perms[:, None, :], axis=2).reshape(f.shape)
    return (out, perms) if return_permutation else out


def _mask4(mask: np.ndarray, f: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=f.dtype)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[2:] != f.shape[2:] or m.shape[0] not in (1, f.shape[0]):
        raise ShapeError(f"mask {np.shape(mask)} cannot broadcast over features {f.shape}")
    return m


def replace(f_orig: np.ndarray, f_bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``f_orig * mask + f_bg * (1 - mask)`` with a spatial keep-mask.

    ``mask`` may be (h, w), (N, h, w), (1, 1, h, w) or (N, 1, h, w).
    """
    if f_orig.shape != f_bg.shape:
        raise ShapeError(f"original {f_orig.shape} and background {f_bg.shape} differ")
    m = _mask4(mask, f_orig)
    return f_orig * m + f_bg * (1 - m)


def background_features(
    model: MiniCNN,
    x: np.ndarray,
    image_mask: np.ndarray,
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
) -> dict[str, np.ndarray]:
    """Hook features of the masked image, treated as constants.

    The same parameters as the main pass are used. Shuffling (per hook,
    per image) needs ``rng``.
    """
    xm = elementwise_mul(x, np.asarray(image_mask, dtype=x.dtype))
    h, _ = model.block_forward(0, xm)
    f2, _ = model.block_forward(1, h)
    f3, _ = model.block_forward(2, f2)
    out = {"block2": f2, "block3": f3}
    if shuffle:
        if rng is None:
            raise ValueError("shuffling background features needs an rng")
        out = {k: spatial_shuffle(v, rng) for k, v in out.items()}
    return out


def drop_block_multiplier(shape, keep_prob: float, block_size: int, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = shape
    if keep_prob >= 1:
        return np.ones((n, 1, h, w), dtype=np.float32)
    bs = masks.fit_block_size(block_size, h, w)
    gamma = masks.calibrate_gamma(keep_prob, bs, h, w)
    seeds = masks.sample_seeds_uniform(gamma, h, w, rng, bs, n)
    keep = masks.expand_seeds(seeds, bs)[:, None]
    ones = keep.sum()
    if ones == 0:
        return keep
    return keep * np.float32(keep.size / ones)


def drop_block_apply(f, keep_prob: float, block_size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero uniform random blocks and rescale survivors by numel/count_ones."""
    return f * drop_block_multiplier(f.shape, keep_prob, block_size, rng)


def spatial_dropout_multiplier(shape, keep_prob: float, rng) -> np.ndarray:
    n, c = shape[:2]
    if keep_prob >= 1:
        return np.ones((n, c, 1, 1), dtype=np.float32)
    keep = rng.random((n, c, 1, 1)) < keep_prob
    return keep.astype(np.float32) / np.float32(keep_prob)


def spatial_dropout_apply(f, keep_prob: float, rng) -> np.ndarray:
    return f * spatial_dropout_multiplier(f.shape, keep_prob, rng)


def dropout_multiplier(shape, keep_prob: float, rng) -> np.ndarray:
    if keep_prob >= 1:
        return np.ones(shape, dtype=np.float32)
    keep = rng.random(shape) < keep_prob
    return keep.astype(np.float32) / np.float32(keep_prob)


def dropout_apply(f, keep_prob: float, rng) -> np.ndarray:
    return f * dropout_multiplier(f.shape, keep_prob, rng)


def cutout_apply(x_image: np.ndarray, size: int, rng) -> np.ndarray:
    """Zero one size×size square per image at a uniform centre, clipped at borders."""
    n, _, h, w = x_image.shape
    out = x_image.copy()
    cy = rng.integers(0, h, n)
    cx = rng.integers(0, w, n)
    for i in range(n):
        y0, y1 = max(cy[i] - size // 2, 0), min(cy[i] - size // 2 + size, h)
        x0, x1 = max(cx[i] - size // 2, 0), min(cx[i] - size // 2 + size, w)
        out[i, :, y0:y1, x0:x1] = 0
    return out


# -- regularizer objects used by the training loop -------------------------


def _check_keep_prob(kp: float) -> None:
    if not 0 < kp <= 1:
        raise ValueError(f"keep_prob must be in (0,1], got {kp}")


class Regularizer:
    """No-op base. Subclasses override the pieces they need."""

    kind = "none"
    hooks: tuple[str, ...] = HOOKS

    def transform_input(self, x, rng):
        return x

    def begin(self, model, x, labels, step, rng):
        return None

    def at_hook(self, hook, features, ctx, rng):
        """Return ``(new_features, multiplier)``; multiplier None means untouched."""
        return features, None

    def describe(self) -> dict:
        return {"kind": self.kind}


class NoRegularizer(Regularizer):
    pass


@dataclass
class DropBlock(Regularizer):
    keep_prob: float = 0.9
    block_size: int = 3
    kind = "drop_block"

    def __post_init__(self):
        _check_keep_prob(self.keep_prob)

    def at_hook(self, hook, features, ctx, rng):
        mult = drop_block_multiplier(features.shape, self.keep_prob, self.block_size, rng)
        return features * mult, mult

    def describe(self):
        return {"kind": self.kind, "keep_prob": self.keep_prob, "block_size": self.block_size}


@dataclass
class SpatialDropout(Regularizer):
    keep_prob: float = 0.9
    kind = "spatial_dropout"

    def __post_init__(self):
        _check_keep_prob(self.keep_prob)

    def at_hook(self, hook, features, ctx, rng):
        mult = spatial_dropout_multiplier(features.shape, self.keep_prob, rng)
        return features * mult, mult

    def describe(self):
        return {"kind": self.kind, "keep_prob": self.keep_prob}


@dataclass
class Dropout(Regularizer):
    keep_prob: float = 0.7
    kind = "dropout"

    def __post_init__(self):
        _check_keep_prob(self.keep_prob)

    def at_hook(self, hook, features, ctx, rng):
        mult = dropout_multiplier(features.shape, self.keep_prob, rng)
        return features * mult, mult

    def describe(self):
        return {"kind": self.kind, "keep_prob": self.keep_prob}


@dataclass
class Cutout(Regularizer):
    size: int = 8
    kind = "cutout"
    hooks = ()

    def transform_input(self, x, rng):
        return cutout_apply(x, self.size, rng)

    def describe(self):
        return {"kind": self.kind, "size": self.size}


@dataclass
class ReplaceBlockConfig:
    keep_prob: float = 0.9
    block_size: int = 3
    threshold_ratio: float = 0.20
    sampling_mode: str = masks.RR_SM
    schedule: str = ALL_TIME
    shuffle: bool = True
    hook_points: list[str] = field(default_factory=lambda: list(HOOKS))

    def __post_init__(self):
        masks.MaskGenConfig(self.keep_prob, self.block_size, self.sampling_mode)
        if not 0 < self.threshold_ratio < 1:
            raise ValueError(f"threshold_ratio must be in (0,1), got {self.threshold_ratio}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        unknown = set(self.hook_points) - set(HOOKS)
        if unknown:
            raise ValueError(f"unknown hook points {sorted(unknown)}; available: {HOOKS}")


@dataclass
class ReplaceContext:
    attention: np.ndarray  # (N, h3, w3) clamped CAM
    image_mask: np.ndarray  # (N, 1, H, W) TC-DM at image resolution
    background: dict[str, np.ndarray]
    feature_masks: dict[str, np.ndarray]  # hook -> (N, 1, h, w) B_feature
    reuse: dict[int, tuple]  # block index -> (output, cache) from the attention pass


class ReplaceBlock(Regularizer):
    """Replace attention-sampled feature blocks with background-only features.

    Per active step: one pass on the clean image gives the CAM; the CAM is
    thresholded into a target-class drop mask that blanks the object in the
    input; a second pass on that masked image yields background features
    (constants, optionally shuffled); at each hook point, blocks sampled in
    proportion to attention are overwritten with those background features.
    """

    kind = "replace_block"

    def __init__(self, config: ReplaceBlockConfig | None = None, **overrides):
        self.config = config if config is not None else ReplaceBlockConfig(**overrides)
        self.hooks = tuple(self.config.hook_points)

    def active(self, step: int) -> bool:
        return self.config.schedule == ALL_TIME or step % 2 == 0

    def begin(self, model, x, labels, step, rng):
        if not self.active(step) or labels is None:
            return None
        cfg = self.config
        reuse = {}
        h = x
        for i in range(3):
            h, cache = model.block_forward(i, h)
            reuse[i] = (h, cache)
        f3 = reuse[2][0]
        attention = cam.cam_batch(f3, model.classifier_weights, labels)
        tcdm = cam.tcdm_batch(attention, cfg.threshold_ratio)
        image_mask = resample_nearest(tcdm, x.shape[2], x.shape[3])[:, None]
        background = background_features(model, x, image_mask, rng, cfg.shuffle)
        gen = masks.MaskGenConfig(cfg.keep_prob, cfg.block_size, cfg.sampling_mode)
        feature_masks = {}
        for hook in self.hooks:
            hh, ww = background[hook].shape[2:]
            att = resample_nearest(attention, hh, ww)
            feature_masks[hook] = masks.sample_block_mask((hh, ww), gen, rng, attention=att)[:, None]
        return ReplaceContext(attention, image_mask, background, feature_masks, reuse)

    def at_hook(self, hook, features, ctx, rng):
        if ctx is None or hook not in ctx.feature_masks:
            return features, None
        m = ctx.feature_masks[hook].astype(features.dtype, copy=False)
        return replace(features, ctx.background[hook].astype(features.dtype, copy=False), m), m

    def describe(self):
        return {"kind": self.kind, **asdict(self.config)}


KINDS = ("none", "replace_block", "drop_block", "spatial_dropout", "dropout", "cutout")


def build_regularizer(spec: dict | None) -> Regularizer:
    """Instantiate from a ``{"kind": ..., **params}`` dictionary."""
    spec = dict(spec or {"kind": "none"})
    kind = spec.pop("kind", "none")
    if kind == "none":
        return NoRegularizer()
    if kind == "replace_block":
        return ReplaceBlock(ReplaceBlockConfig(**spec))
    if kind == "drop_block":
        return DropBlock(**spec)
    if kind == "spatial_dropout":
        return SpatialDropout(**spec)
    if kind == "dropout":
        return Dropout(**spec)
    if kind == "cutout":
        return Cutout(**spec)
    raise ValueError(f"unknown regularizer kind {kind!r}; expected one of {KINDS}")
