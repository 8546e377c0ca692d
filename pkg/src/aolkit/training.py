"""Margin loss, backprop through the AOL rescale, and SGD with Nesterov momentum."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from aolkit.layers import Model, backward, forward, forward_with_cache

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or activations became non-finite. ``last_good`` holds the last finite model."""

    def __init__(self, message: str, last_good: Model | None = None, epoch: int = 0):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 250
    epochs: int = 1
    milestones: tuple = ()
    weight_decay: float = 5e-4
    loss_offset: float = math.sqrt(2)
    loss_temperature: float = 0.25
    seed: int = 0
    augment: bool = False
    max_shift: float = 0.1  # fraction of the image side
    eval_eps: tuple = ()

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.eval_eps = tuple(float(e) for e in self.eval_eps)
        if not self.lr0 >= 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.loss_temperature > 0:
            raise ValueError(f"loss_temperature must be positive, got {self.loss_temperature}")
        if not self.loss_offset >= 0:
            raise ValueError(f"loss_offset must be non-negative, got {self.loss_offset}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr0 * 0.1 ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["eval_eps"] = list(self.eval_eps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptState:
    velocity: list
    epoch: int = 0
    lr: float = 0.0

    @classmethod
    def zeros_like(cls, model: Model, lr: float = 0.0) -> "OptState":
        vel = [None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
               for p in model.params]
        return cls(vel, 0, lr)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels must be a 1-D array of class indices")
    y = np.zeros((labels.size, num_classes))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _check_one_hot(y: np.ndarray, s: np.ndarray) -> None:
    if y.shape != s.shape:
        raise ValueError(f"labels shape {y.shape} does not match scores {s.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("y must contain one-hot rows")


def margin_loss(s, y, u: float = math.sqrt(2), t: float = 0.25, return_grad: bool = False):
    """Batch mean of ``t * crossentropy(y, softmax((s - u*y) / t))``.

    With ``return_grad`` the gradient with respect to ``s`` is returned too.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if not t > 0:
        raise ValueError("temperature must be positive")
    _check_one_hot(y, s)
    z = (s - u * y) / t
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    total = e.sum(axis=1, keepdims=True)
    lse = np.log(total) + zmax
    per_example = t * (lse[:, 0] - (z * y).sum(axis=1))
    loss = float(per_example.mean())
    if not return_grad:
        return loss
    return loss, (e / total - y) / len(s)


def loss_and_grad(model: Model, x, labels, u: float, t: float):
    """Mean margin loss over the batch, its parameter gradients, and the logits."""
    logits, caches = forward_with_cache(model, x)
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged("non-finite logits in forward pass")
    y = one_hot(labels, logits.shape[1])
    loss, dlogits = margin_loss(logits, y, u, t, return_grad=True)
    _, grads = backward(model, caches, dlogits)
    return loss, grads, logits


def grad(model: Model, batch, cfg: TrainConfig):
    """Gradients of the mean margin loss for ``batch = (x, labels)``."""
    x, labels = batch
    _, grads, _ = loss_and_grad(model, x, labels, cfg.loss_offset, cfg.loss_temperature)
    return grads


def sgd_nesterov_step(params: list, grads: list, state: OptState, cfg: TrainConfig,
                      lr: float | None = None) -> None:
    """In-place update: ``g' = g + wd*P; v = mu*v - lr*g'; p += mu*v - lr*g'``.

    Weight decay is applied to the raw ``P`` tensors only, never to biases.
    """
    lr = state.lr if lr is None else lr
    mu, wd = cfg.momentum, cfg.weight_decay
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ValueError("params, grads and optimizer state are misaligned")
    for p, g, v in zip(params, grads, state.velocity):
        if p is None:
            continue
        for name, value in p.items():
            gn = g[name]
            if gn.shape != value.shape or v[name].shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {gn.shape}")
            if name == "P" and wd:
                gn = gn + wd * value
            v[name] *= mu
            v[name] -= lr * gn
            value += mu * v[name] - lr * gn


def augment_batch(x: np.ndarray, rng: np.random.Generator, max_shift: float = 0.1) -> np.ndarray:
    """Per-sample random horizontal flip (p=0.5) and integer shift with zero fill."""
    if x.ndim != 4:
        return x
    n, h, w, _ = x.shape
    out = np.zeros_like(x)
    flips = rng.random(n) < 0.5
    mh, mw = int(max_shift * h), int(max_shift * w)
    dys = rng.integers(-mh, mh + 1, n)
    dxs = rng.integers(-mw, mw + 1, n)
    for i in range(n):
        img = x[i, :, ::-1] if flips[i] else x[i]
        dy, dx = dys[i], dxs[i]
        out[i, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
            img[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of strictly correct predictions; argmax ties count as wrong."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    true = logits[np.arange(len(labels)), labels]
    other = logits.copy()
    other[np.arange(len(labels)), labels] = -np.inf
    return float(np.mean(true > other.max(axis=1)))


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)
    state: OptState | None = None


def train(model: Model, train_set, cfg: TrainConfig, val_set=None, callbacks=()) -> TrainResult:
    """Train ``model`` in place. ``train_set``/``val_set`` are ``(x, labels)`` pairs.

    Each epoch logs lr, mean train loss, running train accuracy, validation
    accuracy and certified accuracy at ``cfg.eval_eps``. Models with
    unrescaled layers are certified with their audited Lipschitz estimate
    instead of 1. Callbacks receive
    ``(record, model)`` after every epoch.
    """
    from aolkit.certification import certified_robust_accuracy
    from aolkit.diagnostics import lipschitz_bound

    x, labels = train_set
    x, labels = np.asarray(x, dtype=np.float64), np.asarray(labels)
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"dataset shape {x.shape[1:]} does not match model input {model.input_shape}")
    n = len(x)
    rng = np.random.default_rng(cfg.seed)
    state = OptState.zeros_like(model, cfg.lr0)
    history = []
    last_good = model.copy()
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            if cfg.augment:
                xb = augment_batch(xb, rng, cfg.max_shift)
            try:
                loss, grads, logits = loss_and_grad(model, xb, labels[idx],
                                                    cfg.loss_offset, cfg.loss_temperature)
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from None
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, epoch)
            sgd_nesterov_step(model.params, grads, state, cfg)
            loss_sum += loss * len(idx)
            correct += accuracy(logits, labels[idx]) * len(idx)
        record = {"epoch": epoch + 1, "lr": state.lr,
                  "train_loss": loss_sum / max(n, 1), "train_acc": correct / max(n, 1)}
        if val_set is not None:
            report = certified_robust_accuracy(model, val_set, cfg.eval_eps,
                                               L=lipschitz_bound(model))
            record["val_acc"] = report.clean_accuracy
            for eps, acc in zip(report.eps_list, report.cert_acc):
                record[f"cert_acc@{eps:.6g}"] = acc
        history.append(record)
        log.info("epoch %d: %s", epoch + 1, record)
        last_good = model.copy()
        for cb in callbacks:
            cb(record, model)
    state.epoch = cfg.epochs
    return TrainResult(model, history, state)


def evaluate(model: Model, x, labels, batch_size: int = 1000) -> float:
    return accuracy(forward(model, x, batch_size), labels)
