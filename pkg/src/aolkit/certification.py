"""Lipschitz-margin certificates and an empirical attack probe."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from aolkit.layers import Model, backward, forward, forward_with_cache

DEFAULT_EPS = (36 / 255, 72 / 255, 108 / 255, 1.0)


def margin(logits, y: int) -> float:
    """``max(0, s_y - max_{i != y} s_i)``."""
    s = np.asarray(logits, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError("margin needs a 1-D logit vector with at least two classes")
    if not 0 <= y < s.size:
        raise ValueError(f"label {y} out of range for {s.size} classes")
    return max(0.0, float(s[y] - np.delete(s, y).max()))


def margins(logits, labels) -> np.ndarray:
    """Vectorised unclamped margins ``s_y - max_{i != y} s_i``."""
    s = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    true = s[rows, labels]
    other = s.copy()
    other[rows, labels] = -np.inf
    return true - other.max(axis=1)


def certified(margin_value: float, eps: float, L: float = 1.0) -> bool:
    """A point is certified at radius ``eps`` iff ``margin > sqrt(2) * L * eps``."""
    return bool(margin_value > math.sqrt(2) * L * eps)


@dataclass
class CertReport:
    eps_list: list
    certified: list
    total: int
    cert_acc: list
    clean_accuracy: float
    margins: np.ndarray = field(repr=False)
    lipschitz_bound: float = 1.0

    def to_dict(self, include_margins: bool = False) -> dict:
        d = {
            "lipschitz_bound": self.lipschitz_bound,
            "total": self.total,
            "clean_accuracy": self.clean_accuracy,
            "results": [{"eps": e, "certified": c, "total": self.total, "cert_acc": a}
                        for e, c, a in zip(self.eps_list, self.certified, self.cert_acc)],
        }
        if include_margins:
            d["margins"] = self.margins.tolist()
        return d

    def to_json(self, include_margins: bool = False) -> str:
        return json.dumps(self.to_dict(include_margins), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["eps", "certified", "total", "cert_acc"])
        for e, c, a in zip(self.eps_list, self.certified, self.cert_acc):
            writer.writerow([repr(e), c, self.total, repr(a)])
        return buf.getvalue()


def report_from_logits(logits, labels, eps_list=DEFAULT_EPS, L: float = 1.0) -> CertReport:
    labels = np.asarray(labels)
    m = np.maximum(margins(logits, labels), 0.0) if len(labels) else np.zeros(0)
    total = int(len(labels))
    counts, accs = [], []
    for eps in eps_list:
        c = int(np.count_nonzero(m > math.sqrt(2) * L * eps))
        counts.append(c)
        accs.append(c / total if total else 0.0)
    clean = float(np.count_nonzero(m > 0)) / total if total else 0.0
    return CertReport([float(e) for e in eps_list], counts, total, accs, clean, m, float(L))


def certified_robust_accuracy(model: Model, dataset, eps_list=DEFAULT_EPS, L: float = 1.0,
                              batch_size: int = 1000) -> CertReport:
    """Certified robust accuracy of ``model`` on ``dataset = (x, labels)`` per radius."""
    if not L > 0:
        raise ValueError("Lipschitz bound must be positive")
    x, labels = dataset
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"dataset shape {x.shape[1:]} does not match model input {model.input_shape}")
    logits = forward(model, x, batch_size)
    return report_from_logits(logits, labels, eps_list, L)


def _predict(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, x), axis=1)


def attack_check(model: Model, x, y: int, eps: float, n_trials: int = 1000,
                 refine_steps: int = 20, L: float = 1.0, seed: int = 0) -> bool:
    """Search the L2 ball of radius ``eps`` around a certified point for a flip.

    Samples ``n_trials`` points on the sphere, then runs projected gradient
    ascent on the best competing logit gap from the worst sample. Returns
    ``False`` iff some perturbed input is classified differently.
    """
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return True
    logits = forward(model, x)
    m = margin(logits, y)
    if not certified(m, eps, L):
        raise ValueError(f"input is not certified at eps={eps} (margin {m:.6g}); attack_check "
                         "requires a certified point")
    pred = int(np.argmax(logits))
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_trials,) + x.shape)
    norms = np.sqrt((dirs.reshape(n_trials, -1) ** 2).sum(axis=1))
    dirs *= (eps / norms).reshape((n_trials,) + (1,) * x.ndim)
    out = forward(model, x[None] + dirs)
    if np.any(np.argmax(out, axis=1) != pred):
        return False
    gap = margins(out, np.full(n_trials, pred))
    delta = dirs[int(np.argmin(gap))]
    step = 2.5 * eps / max(refine_steps, 1)
    for _ in range(refine_steps):
        s, caches = forward_with_cache(model, (x + delta)[None])
        if int(np.argmax(s[0])) != pred:
            return False
        other = s[0].copy()
        other[pred] = -np.inf
        j = int(np.argmax(other))
        dout = np.zeros_like(s)
        dout[0, j], dout[0, pred] = 1.0, -1.0  # ascend s_j - s_pred
        dx, _ = backward(model, caches, dout)
        g = dx[0]
        gn = np.sqrt((g ** 2).sum())
        if gn == 0:
            break
        delta = delta + step * g / gn
        dn = np.sqrt((delta ** 2).sum())
        if dn > eps:
            delta *= eps / dn
    return int(np.argmax(forward(model, x + delta))) == pred
