"""Loss, optimizer, learning-rate schedule and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import MiniCNN
from .regularizers import NoRegularizer, Regularizer, ReplaceBlock


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-5
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class RunRecord:
    epoch: int
    train_loss: float
    train_top1: float
    test_top1: float
    lr: float

    def __post_init__(self):
        for name in ("train_top1", "test_top1"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must be a percentage, got {v}")


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype, copy=False)


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
                      weight_decay: float) -> None:
    """In place: ``v = m*v + g + wd*p``; ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class SGD:
    """Momentum SGD over a per-step cosine schedule."""

    lr0: float
    momentum: float
    weight_decay: float
    total_steps: int
    step: int = 0
    velocity: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.step, self.total_steps), self.total_steps, self.lr0)

    def update(self, params: dict, grads: dict) -> float:
        lr = self.lr
        sgd_momentum_step(params, grads, self.velocity, lr, self.momentum, self.weight_decay)
        self.step += 1
        return lr


# -- forward/backward with a regularizer in the loop ------------------------


@dataclass
class Tape:
    block_caches: list
    multipliers: dict
    head_cache: object
    context: object = None


def training_forward(model: MiniCNN, x, labels, regularizer: Regularizer | None, step: int,
                     rng: np.random.Generator | None):
    """Logits plus everything needed by :func:`training_backward`."""
    reg = regularizer or NoRegularizer()
    model.check_input(x)
    x = reg.transform_input(x, rng)
    ctx = reg.begin(model, x, labels, step, rng)
    reuse = getattr(ctx, "reuse", None) or {}
    caches, mults = [], {}
    h, altered = x, False
    for i in range(3):
        if i in reuse and not altered:
            h, cache = reuse[i]
        else:
            h, cache = model.block_forward(i, h)
        caches.append(cache)
        hook = f"block{i + 1}"
        if hook in reg.hooks:
            h_new, mult = reg.at_hook(hook, h, ctx, rng)
            if mult is not None:
                h, altered = h_new, True
                mults[hook] = mult
    logits, head_cache = model.head_forward(h)
    return logits, Tape(caches, mults, head_cache, ctx)


def training_backward(model: MiniCNN, tape: Tape, grad_logits: np.ndarray) -> dict:
    grads: dict = {}
    g = model.head_backward(grad_logits, tape.head_cache, grads)
    for i in reversed(range(3)):
        mult = tape.multipliers.get(f"block{i + 1}")
        if mult is not None:
            g = g * mult
        g = model.block_backward(i, g, tape.block_caches[i], grads, need_input_grad=i > 0)
    return grads


def forward(model: MiniCNN, x, regularizer: Regularizer | None = None, training: bool = False,
            labels=None, step: int = 0, rng=None) -> np.ndarray:
    """Logits. Outside training the regularizer is ignored entirely."""
    if not training:
        return model.predict(x)
    return training_forward(model, x, labels, regularizer, step, rng)[0]


def replace_block_apply(model: MiniCNN, x, labels, config, step: int, rng):
    """Training-mode forward with ReplaceBlock; returns ``(logits, tape)``."""
    return training_forward(model, x, labels, ReplaceBlock(config), step, rng)


def loss_and_grads(model, x, labels, regularizer=None, step=0, rng=None):
    logits, tape = training_forward(model, x, labels, regularizer, step, rng)
    loss, g = softmax_cross_entropy(logits, labels)
    return loss, logits, training_backward(model, tape, g)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Generator owned by a single training step (regularizer sampling)."""
    return np.random.default_rng([seed, 0x5EED, step])


def train_epoch(model: MiniCNN, batches, optimizer: SGD, regularizer: Regularizer | None,
                seed: int, epoch: int = 1, test_set=None, eval_batch: int = 500) -> RunRecord:
    """One pass over ``batches`` (an iterable of ``(x, labels)``)."""
    total_loss, correct, count = 0.0, 0, 0
    lr = optimizer.lr
    for x, y in batches:
        rng = step_rng(seed, optimizer.step)
        loss, logits, grads = loss_and_grads(model, x, y, regularizer, optimizer.step, rng)
        lr = optimizer.update(model.params, grads)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
        count += len(y)
    if count == 0:
        raise ValueError("empty dataset: no batches to train on")
    test_top1 = evaluate(model, *test_set, batch_size=eval_batch) if test_set is not None else 0.0
    return RunRecord(epoch, total_loss / count, 100.0 * correct / count, test_top1, lr)


def evaluate(model: MiniCNN, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    for i in range(0, len(y), batch_size):
        logits = model.predict(x[i : i + batch_size])
        correct += int((logits.argmax(axis=1) == y[i : i + batch_size]).sum())
    return 100.0 * correct / len(y)
