"""Independent oracles: power iteration, explicit Jacobians, JᵀJ statistics,
per-layer bound audits and a finite-difference gradient check."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from aolkit.layers import AolFC, Layer, Model, forward_with_cache
from aolkit.training import loss_and_grad, margin_loss, one_hot

MAX_JACOBIAN_DIM = 10_000
BOUND_TOL = 1e-9


def spectral_norm_power_iteration(apply: Callable, apply_transpose: Callable, dim: int,
                                  iters: int = 200, seed: int = 0, tol: float = 1e-12) -> float:
    """Estimate the largest singular value by power iteration on ``AᵀA``.

    Returns ``||A v||`` for the final unit vector ``v``, a lower bound on the
    true value. Stops early once the estimate changes by less than ``tol``
    (relative).
    """
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = apply_transpose(apply(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.linalg.norm(apply(v)))
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return sigma


def matrix_spectral_norm(A, iters: int = 200, seed: int = 0, tol: float = 1e-12) -> float:
    A = np.asarray(A, dtype=np.float64)
    return spectral_norm_power_iteration(lambda v: A @ v, lambda u: A.T @ u, A.shape[1],
                                         iters, seed, tol)


def _in_dim(shape) -> int:
    return int(np.prod(shape))


def materialize_jacobian(layer: Layer, params, input_shape, chunk: int = 512) -> np.ndarray:
    """Explicit bias-free Jacobian ``(out_dim, in_dim)`` of a linear layer.

    Column ``j`` is the layer's linear part applied to the basis vector
    ``e_j`` (which equals ``forward(e_j) - forward(0)``). Both sides are
    flattened row-major.
    """
    if not getattr(layer, "linear", False):
        raise ValueError(f"layer {layer.kind!r} is not linear; no constant Jacobian")
    input_shape = tuple(input_shape)
    n = _in_dim(input_shape)
    if n > MAX_JACOBIAN_DIM:
        raise ValueError(f"input dimension {n} exceeds the Jacobian guard of {MAX_JACOBIAN_DIM}")
    W = layer.effective_weight(params)[0] if layer.has_params else None
    cols = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        basis = np.zeros((stop - start, n))
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        out = layer.linear_apply(basis.reshape((stop - start,) + input_shape), params, W)
        cols.append(out.reshape(stop - start, -1))
    return np.concatenate(cols).T


def layer_operator(layer: Layer, params, input_shape):
    """``(apply, apply_transpose, in_dim)`` on flat vectors for a linear layer."""
    input_shape = tuple(input_shape)
    W = layer.effective_weight(params)[0] if layer.has_params else None

    def apply(v):
        return layer.linear_apply(v.reshape((1,) + input_shape), params, W).ravel()

    def apply_t(u):
        out_shape = layer.output_shape(input_shape)
        return layer.linear_transpose(u.reshape((1,) + tuple(out_shape)), params,
                                      input_shape, W).ravel()

    return apply, apply_t, _in_dim(input_shape)


@dataclass
class GramStats:
    gram: np.ndarray = field(repr=False)
    diag_mean: float
    diag_min: float
    diag_max: float
    offdiag_mean_abs: float
    offdiag_max_abs: float
    orthogonality_ratio: float

    def summary(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "gram"}


def gram_stats(J) -> GramStats:
    J = np.asarray(J, dtype=np.float64)
    G = J.T @ J
    diag = np.diag(G).copy()
    off = np.abs(G - np.diag(diag))
    d = G.shape[0]
    n_off = d * d - d
    off_mean = float(off.sum() / n_off) if n_off else 0.0
    diag_mean = float(diag.mean())
    return GramStats(
        gram=G,
        diag_mean=diag_mean,
        diag_min=float(diag.min()),
        diag_max=float(diag.max()),
        offdiag_mean_abs=off_mean,
        offdiag_max_abs=float(off.max()) if n_off else 0.0,
        orthogonality_ratio=off_mean / diag_mean if diag_mean > 0 else math.inf,
    )


def gram_analysis(layer: Layer, params, input_shape) -> GramStats:
    return gram_stats(materialize_jacobian(layer, params, input_shape))


def gram_crops(G: np.ndarray, size: int, offsets=((0, 0), (0, 1), (1, 0))) -> dict:
    """Centre crop of ``G`` plus crops shifted by ``offset * size`` from the centre.

    Returns ``{name: (row0, col0, block)}`` keyed ``centre``, ``crop1``, ``crop2``.
    """
    n = G.shape[0]
    size = min(size, n)
    c0 = (n - size) // 2
    names = ["centre", "crop1", "crop2"]
    out = {}
    for name, (dr, dc) in zip(names, offsets):
        r = int(np.clip(c0 + dr * size, 0, n - size))
        c = int(np.clip(c0 + dc * size, 0, n - size))
        out[name] = (r, c, G[r:r + size, c:c + size])
    return out


def crops_to_csv(crops: dict) -> dict:
    """CSV text per crop with columns ``row, col, value`` in global indices."""
    texts = {}
    for name, (r0, c0, block) in crops.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for i in range(block.shape[0]):
            for j in range(block.shape[1]):
                w.writerow([r0 + i, c0 + j, repr(float(block[i, j]))])
        texts[name] = buf.getvalue()
    return texts


@dataclass
class LayerBound:
    index: int
    kind: str
    sigma_max: float
    flagged: bool


@dataclass
class BoundAudit:
    layers: list
    product: float
    tol: float = BOUND_TOL

    @property
    def flagged(self) -> list:
        return [row for row in self.layers if row.flagged]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "sigma_max", "flagged"])
        for row in self.layers:
            w.writerow([row.index, row.kind, repr(row.sigma_max), int(row.flagged)])
        w.writerow(["product", "", repr(self.product), int(not self.passed)])
        return buf.getvalue()


def audit_model_bound(model: Model, iters: int = 200, seed: int = 0,
                      tol: float = BOUND_TOL) -> BoundAudit:
    """Per-layer operator-norm estimates along the model's shape chain.

    Parametrised layers use power iteration on the layer operator at its
    actual input shape; the fixed blocks (MaxMin, pooling, truncation,
    flatten) are 1-Lipschitz by construction and are reported as 1.
    """
    shapes = model.shapes()
    rows = []
    product = 1.0
    for i, (layer, p) in enumerate(zip(model.layers, model.params)):
        if layer.has_params:
            if isinstance(layer, AolFC):
                W = layer.effective_weight(p)[0]
                sigma = matrix_spectral_norm(W, iters, seed)
            else:
                apply, apply_t, dim = layer_operator(layer, p, shapes[i])
                sigma = spectral_norm_power_iteration(apply, apply_t, dim, iters, seed)
        else:
            sigma = 1.0
        product *= sigma
        rows.append(LayerBound(i, layer.kind, sigma, sigma > 1.0 + tol))
    return BoundAudit(rows, product, tol)


def lipschitz_bound(model: Model, iters: int = 200) -> float:
    """1 when every parametrised layer is rescaled, else the audited product.

    The audited product is a power-iteration estimate, so certificates that
    rely on it are only as good as that estimate.
    """
    if all(getattr(layer, "rescale", True) for layer in model.layers):
        return 1.0
    return audit_model_bound(model, iters=iters).product


def bound_check_callback(tol: float = BOUND_TOL, iters: int = 200):
    """Training callback that raises if any layer's bound is violated."""

    def check(record, model):
        audit = audit_model_bound(model, iters=iters, tol=tol)
        if not audit.passed:
            raise AssertionError(f"epoch {record['epoch']}: bound violated by {audit.flagged}")
        record["max_sigma"] = max((r.sigma_max for r in audit.layers), default=0.0)

    return check


@dataclass
class GradCheckResult:
    max_rel_error: float
    coords: list
    passed: bool
    tol: float


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(model: Model, x, labels, u: float = math.sqrt(2), t: float = 0.25,
              n_coords: int = 50, h: float = 1e-5, tol: float = 1e-4, seed: int = 0,
              floor: float = 1e-8) -> GradCheckResult:
    """Compare backprop gradients with central differences on sampled coordinates."""
    labels = np.asarray(labels)
    _, grads, logits = loss_and_grad(model, x, labels, u, t)
    y = one_hot(labels, logits.shape[1])

    def loss_at() -> float:
        s, _ = forward_with_cache(model, x)
        return margin_loss(s, y, u, t)

    entries = [(i, name) for i, p in enumerate(model.params) if p is not None for name in sorted(p)]
    sizes = np.array([model.params[i][name].size for i, name in entries])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords = []
    worst = 0.0
    for fid in sorted(flat_ids):
        e = int(np.searchsorted(offsets, fid, side="right") - 1)
        i, name = entries[e]
        local = int(fid - offsets[e])
        arr = model.params[i][name]
        pos = np.unravel_index(local, arr.shape)
        old = arr[pos]
        arr[pos] = old + h
        lp = loss_at()
        arr[pos] = old - h
        lm = loss_at()
        arr[pos] = old
        fd = (lp - lm) / (2 * h)
        an = float(grads[i][name][pos])
        err = relative_error(fd, an, floor)
        worst = max(worst, err)
        coords.append({"layer": i, "param": name, "index": local, "analytic": an,
                       "numeric": fd, "rel_error": err})
    return GradCheckResult(worst, coords, worst < tol, tol)
