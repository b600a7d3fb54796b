"""MiniCNN: three conv blocks, global average pooling and a linear head.

Parameters live in a flat ``dict[str, ndarray]``; every forward function is
pure and returns an explicit cache for the matching backward, so the same
weights can drive several passes (e.g. the background pass of ReplaceBlock)
without one pass clobbering another's state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

HOOKS = ("block2", "block3")


@dataclass
class BlockCache:
    x: np.ndarray
    cols: np.ndarray
    z_shape: tuple[int, ...]
    pooled: np.ndarray
    argmax: np.ndarray


@dataclass
class HeadCache:
    features_shape: tuple[int, ...]
    pooled: np.ndarray


class MiniCNN:
    """conv3x3 → ReLU → maxpool2, three times, then GAP and a linear classifier.

    The outputs of the second and third block are the hook points where
    feature-level regularizers act.
    """

    def __init__(
        self,
        num_classes: int = 10,
        in_channels: int = 3,
        widths: tuple[int, int, int] = (32, 64, 128),
        seed: int = 0,
        dtype=T.DTYPE,
    ):
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        cin = in_channels
        for i, cout in enumerate(self.widths):
            std = np.sqrt(2.0 / (cin * 9))
            self.params[f"conv{i + 1}.weight"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(dtype)
            self.params[f"conv{i + 1}.bias"] = np.zeros(cout, dtype=dtype)
            cin = cout
        bound = 1.0 / np.sqrt(cin)
        self.params["fc.weight"] = rng.uniform(-bound, bound, (num_classes, cin)).astype(dtype)
        self.params["fc.bias"] = np.zeros(num_classes, dtype=dtype)

    @property
    def classifier_weights(self) -> np.ndarray:
        return self.params["fc.weight"]

    def copy(self) -> "MiniCNN":
        clone = object.__new__(MiniCNN)
        clone.num_classes = self.num_classes
        clone.in_channels = self.in_channels
        clone.widths = self.widths
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def astype(self, dtype) -> "MiniCNN":
        clone = self.copy()
        clone.params = {k: v.astype(dtype) for k, v in clone.params.items()}
        return clone

    # -- blocks -------------------------------------------------------------

    def block_forward(self, i: int, x: np.ndarray) -> tuple[np.ndarray, BlockCache]:
        w = self.params[f"conv{i + 1}.weight"]
        b = self.params[f"conv{i + 1}.bias"]
        z, cols = T.conv2d_forward(x, w, b, stride=1, pad=1, return_cols=True)
        # pool before ReLU: max and ReLU commute, and the ReLU then runs on 1/4 of the data
        pooled, argmax = T.maxpool2d(z, 2)
        return T.relu(pooled), BlockCache(x, cols, z.shape, pooled, argmax)

    def block_backward(self, i: int, grad: np.ndarray, cache: BlockCache, grads: dict,
                       need_input_grad: bool = True):
        gp = T.relu_backward(grad, cache.pooled)
        gz = T.maxpool2d_backward(gp, cache.argmax, cache.z_shape, 2)
        gx, gw, gb = T.conv2d_backward(
            gz, cache.x, self.params[f"conv{i + 1}.weight"], stride=1, pad=1,
            cols=cache.cols, need_input_grad=need_input_grad,
        )
        grads[f"conv{i + 1}.weight"] = gw
        grads[f"conv{i + 1}.bias"] = gb
        return gx

    def head_forward(self, features: np.ndarray) -> tuple[np.ndarray, HeadCache]:
        w = self.params["fc.weight"]
        if features.ndim != 4 or features.shape[1] != w.shape[1]:
            raise T.ShapeError(
                f"head expects (N,{w.shape[1]},h,w) features, got {features.shape}"
            )
        pooled = T.global_avg_pool(features)[:, :, 0, 0]
        logits = pooled @ w.T + self.params["fc.bias"]
        return logits, HeadCache(features.shape, pooled)

    def head_backward(self, grad_logits: np.ndarray, cache: HeadCache, grads: dict) -> np.ndarray:
        grads["fc.weight"] = grad_logits.T @ cache.pooled
        grads["fc.bias"] = grad_logits.sum(axis=0)
        gp = (grad_logits @ self.params["fc.weight"])[:, :, None, None]
        return T.global_avg_pool_backward(gp, cache.features_shape)

    # -- whole-network conveniences ---------------------------------------

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise T.ShapeError(f"expected (N,{self.in_channels},H,W) input, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise T.ShapeError(f"input spatial size must be divisible by 8, got {x.shape[2:]}")

    def forward_backbone(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Features at the two hook points (after block 2 and block 3)."""
        self.check_input(x)
        h, _ = self.block_forward(0, x)
        f2, _ = self.block_forward(1, h)
        f3, _ = self.block_forward(2, f2)
        return f2, f3

    def forward_head(self, features: np.ndarray) -> np.ndarray:
        return self.head_forward(features)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode logits. Regularizers never take part here."""
        return self.forward_head(self.forward_backbone(x)[1])


def save_checkpoint(model: MiniCNN, path) -> None:
    """Write a one-line JSON header followed by raw little-endian float32 data."""
    header = {
        "format": "replaceblock-minicnn-v1",
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "widths": list(model.widths),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(header).encode() + b"\n"
    with open(Path(path), "wb") as fh:
        fh.write(blob)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> MiniCNN:
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    header = json.loads(raw[:end])
    model = MiniCNN(header["num_classes"], header["in_channels"], tuple(header["widths"]))
    offset = end + 1
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        model.params[entry["name"]] = data.reshape(shape).astype(T.DTYPE)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"checkpoint {path}: {len(raw) - offset} trailing bytes")
    return model
