"""Layer zoo, model specs and the forward/backward pass.

Every layer works on batched arrays whose leading axis is the batch. Image
activations are ``(n, h, w, c)``, flat activations ``(n, d)``. Layers are
frozen dataclasses; trainable state lives in ``Model.params`` as one dict
(``{"P": ..., "b": ...}``) per parametrised layer, ``None`` otherwise.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar

import numpy as np

from aolkit.rescale import rescale_kernel, rescale_kernel_vjp
from aolkit.rescale import rescale_matrix, rescale_matrix_vjp
from aolkit.tensor import ConvGeometry, Padding, as_tensor, conv2d
from aolkit.tensor import conv2d_backward_input, conv2d_backward_kernel


class SpecError(ValueError):
    """Invalid model specification or shape chain."""


Shape = tuple


def orthogonal_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with orthonormal columns (tall) or rows (wide)."""
    n, m = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((n, m)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q if rows >= cols else q.T)


class Layer:
    kind: ClassVar[str]
    linear: ClassVar[bool] = False
    has_params: ClassVar[bool] = False

    def output_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, x, params, weights=None):
        """Return ``(y, cache)``."""
        raise NotImplementedError

    def backward(self, dy, cache, params):
        """Return ``(dx, grads)``; ``grads`` is ``None`` for parameter-free layers."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        out = {"type": self.kind}
        for key, value in asdict(self).items():
            out[key] = value.value if isinstance(value, Padding) else value
        return out


# -- parametrised layers -------------------------------------------------


@dataclass(frozen=True)
class AolConv(Layer):
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: Padding = Padding.SAME
    rescale: bool = True

    kind: ClassVar[str] = "aol_conv"
    linear: ClassVar[bool] = True
    has_params: ClassVar[bool] = True

    def __post_init__(self):
        object.__setattr__(self, "padding", Padding.parse(self.padding))
        if self.out_channels < 1 or self.kernel_size < 1 or self.stride < 1:
            raise SpecError(f"invalid aol_conv parameters: {self}")

    def geometry(self, in_channels: int | None = None) -> ConvGeometry:
        return ConvGeometry(self.kernel_size, self.stride, self.padding,
                            in_channels, self.out_channels)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"aol_conv needs an (h, w, c) input, got {in_shape}")
        h, w, _ = in_shape
        geom = self.geometry()
        try:
            return (geom.output_size(h), geom.output_size(w), self.out_channels)
        except ValueError as exc:
            raise SpecError(str(exc)) from None

    def size_preserving(self, in_shape) -> bool:
        return (self.stride == 1 and self.kernel_size % 2 == 1
                and self.padding is Padding.SAME and in_shape[2] == self.out_channels)

    def init_identity(self, in_shape) -> dict:
        if not self.size_preserving(in_shape):
            raise SpecError(f"identity init needs a size-preserving conv, got {self} on {in_shape}")
        k, c = self.kernel_size, self.out_channels
        P = np.zeros((k, k, c, c))
        P[k // 2, k // 2] = np.eye(c)
        return {"P": P, "b": np.zeros(c)}

    def init_orthogonal(self, in_shape, rng) -> dict:
        k, ci, co = self.kernel_size, in_shape[2], self.out_channels
        # the per-patch map is a (c_out, k*k*c_in) matrix; make it orthogonal
        M = orthogonal_matrix(co, k * k * ci, rng)
        return {"P": M.T.reshape(k, k, ci, co), "b": np.zeros(co)}

    def effective_weight(self, params):
        if not self.rescale:
            return params["P"], None
        res = rescale_kernel(params["P"])
        return res.W, res

    def forward(self, x, params, weights=None):
        W, res = weights if weights is not None else self.effective_weight(params)
        geom = self.geometry(x.shape[-1])
        y = conv2d(x, W, geom) + params["b"]
        return y, (x, W, res)

    def backward(self, dy, cache, params):
        x, W, res = cache
        geom = self.geometry(x.shape[-1])
        dx = conv2d_backward_input(dy, W, geom, x.shape[1:3])
        dW = conv2d_backward_kernel(x, dy, geom)
        dP = rescale_kernel_vjp(params["P"], res, dW) if self.rescale else dW
        return dx, {"P": dP, "b": dy.sum(axis=(0, 1, 2))}

    def linear_apply(self, x, params, W=None):
        if W is None:
            W, _ = self.effective_weight(params)
        return conv2d(x, W, self.geometry(x.shape[-1]))

    def linear_transpose(self, y, params, in_shape, W=None):
        if W is None:
            W, _ = self.effective_weight(params)
        return conv2d_backward_input(y, W, self.geometry(in_shape[2]), in_shape[:2])


@dataclass(frozen=True)
class AolFC(Layer):
    out_dim: int
    rescale: bool = True

    kind: ClassVar[str] = "aol_fc"
    linear: ClassVar[bool] = True
    has_params: ClassVar[bool] = True

    def __post_init__(self):
        if self.out_dim < 1:
            raise SpecError(f"invalid aol_fc output size {self.out_dim}")

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise SpecError(f"aol_fc needs a flat input, got {in_shape}; add a flatten layer")
        return (self.out_dim,)

    def size_preserving(self, in_shape) -> bool:
        return in_shape[0] == self.out_dim

    def init_identity(self, in_shape) -> dict:
        if not self.size_preserving(in_shape):
            raise SpecError(f"identity init needs in_dim == out_dim, got {in_shape[0]} -> {self.out_dim}")
        return {"P": np.eye(self.out_dim), "b": np.zeros(self.out_dim)}

    def init_orthogonal(self, in_shape, rng) -> dict:
        return {"P": orthogonal_matrix(self.out_dim, in_shape[0], rng),
                "b": np.zeros(self.out_dim)}

    def effective_weight(self, params):
        if not self.rescale:
            return params["P"], None
        res = rescale_matrix(params["P"])
        return res.W, res

    def forward(self, x, params, weights=None):
        W, res = weights if weights is not None else self.effective_weight(params)
        return x @ W.T + params["b"], (x, W, res)

    def backward(self, dy, cache, params):
        x, W, res = cache
        dW = dy.T @ x
        dP = rescale_matrix_vjp(params["P"], res, dW) if self.rescale else dW
        return dy @ W, {"P": dP, "b": dy.sum(axis=0)}

    def linear_apply(self, x, params, W=None):
        if W is None:
            W, _ = self.effective_weight(params)
        return x @ W.T

    def linear_transpose(self, y, params, in_shape, W=None):
        if W is None:
            W, _ = self.effective_weight(params)
        return y @ W


# -- parameter-free layers -----------------------------------------------


@dataclass(frozen=True)
class MaxMin(Layer):
    """Sort consecutive pairs ``(2i, 2i+1)`` of the last axis into (max, min)."""

    kind: ClassVar[str] = "maxmin"

    def output_shape(self, in_shape):
        if in_shape[-1] % 2:
            raise SpecError(f"maxmin needs an even channel count, got {in_shape[-1]}")
        return tuple(in_shape)

    def forward(self, x, params=None, weights=None):
        a, b = x[..., 0::2], x[..., 1::2]
        swap = b > a
        y = np.empty_like(x)
        y[..., 0::2] = np.where(swap, b, a)
        y[..., 1::2] = np.where(swap, a, b)
        return y, swap

    def backward(self, dy, swap, params=None):
        dx = np.empty_like(dy)
        hi, lo = dy[..., 0::2], dy[..., 1::2]
        dx[..., 0::2] = np.where(swap, lo, hi)
        dx[..., 1::2] = np.where(swap, hi, lo)
        return dx, None


@dataclass(frozen=True)
class ConcatPool(Layer):
    """Space-to-depth: each ``patch x patch`` block becomes one pixel.

    The block is flattened in (row, col, channel) order.
    """

    patch: int
    kind: ClassVar[str] = "concat_pool"
    linear: ClassVar[bool] = True

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise SpecError(f"concat_pool needs an (h, w, c) input, got {in_shape}")
        h, w, c = in_shape
        s = self.patch
        if s < 1 or h % s or w % s:
            raise SpecError(f"concat_pool patch {s} does not tile input {in_shape}")
        return (h // s, w // s, s * s * c)

    def forward(self, x, params=None, weights=None):
        return self.linear_apply(x), x.shape

    def backward(self, dy, in_shape, params=None):
        return self.linear_transpose(dy, None, in_shape[1:]), None

    def linear_apply(self, x, params=None, W=None):
        n, h, w, c = x.shape
        s = self.patch
        y = x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)
        return y.reshape(n, h // s, w // s, s * s * c)

    def linear_transpose(self, y, params, in_shape, W=None):
        h, w, c = in_shape
        s = self.patch
        n = y.shape[0]
        x = y.reshape(n, h // s, w // s, s, s, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(n, h, w, c)


@dataclass(frozen=True)
class FirstChannels(Layer):
    """Keep the first ``n`` entries of the last axis, drop the rest."""

    n: int
    kind: ClassVar[str] = "first_channels"
    linear: ClassVar[bool] = True

    def output_shape(self, in_shape):
        if not 1 <= self.n <= in_shape[-1]:
            raise SpecError(f"first_channels n={self.n} exceeds input channels {in_shape[-1]}")
        return tuple(in_shape[:-1]) + (self.n,)

    def forward(self, x, params=None, weights=None):
        return x[..., :self.n], x.shape

    def backward(self, dy, in_shape, params=None):
        return self.linear_transpose(dy, None, in_shape[1:]), None

    def linear_apply(self, x, params=None, W=None):
        return x[..., :self.n]

    def linear_transpose(self, y, params, in_shape, W=None):
        dx = np.zeros((y.shape[0],) + tuple(in_shape))
        dx[..., :self.n] = y
        return dx


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"
    linear: ClassVar[bool] = True

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params=None, weights=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, in_shape, params=None):
        return dy.reshape(in_shape), None

    def linear_apply(self, x, params=None, W=None):
        return x.reshape(x.shape[0], -1)

    def linear_transpose(self, y, params, in_shape, W=None):
        return y.reshape((y.shape[0],) + tuple(in_shape))


LAYER_TYPES: dict[str, type] = {
    cls.kind: cls for cls in (AolConv, AolFC, MaxMin, ConcatPool, FirstChannels, Flatten)
}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise SpecError(f"unknown layer type {kind!r}")
    try:
        return LAYER_TYPES[kind](**d)
    except TypeError as exc:
        raise SpecError(f"bad parameters for {kind}: {exc}") from None


# -- model spec and model ------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shape_chain()

    def shape_chain(self) -> list[tuple]:
        """Input shape followed by each layer's output shape."""
        if not self.layers:
            raise SpecError("model spec has no layers")
        if not self.input_shape or any(v < 1 for v in self.input_shape):
            raise SpecError(f"invalid input shape {self.input_shape}")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except SpecError as exc:
                raise SpecError(f"layer {i} ({layer.kind}): {exc}") from None
        return shapes

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        """Parse a config dict.

        Layer entries may carry two shorthands: ``"repeat": n`` duplicates the
        entry and ``"activation": "maxmin"`` appends a MaxMin after it.
        """
        if "input_shape" not in d or "layers" not in d:
            raise SpecError("model spec needs 'input_shape' and 'layers'")
        layers = []
        for i, entry in enumerate(d["layers"]):
            entry = dict(entry)
            repeat = int(entry.pop("repeat", 1))
            activation = entry.pop("activation", None)
            if activation not in (None, "none", "maxmin"):
                raise SpecError(f"layer entry {i}: unknown activation {activation!r}")
            block = [layer_from_dict(entry)]
            if activation == "maxmin":
                block.append(MaxMin())
            layers.extend(block * repeat)
        return cls(tuple(d["input_shape"]), tuple(layers))


@dataclass
class Model:
    spec: ModelSpec
    params: list = field(default_factory=list)

    @property
    def layers(self) -> tuple:
        return self.spec.layers

    @property
    def input_shape(self) -> tuple:
        return self.spec.input_shape

    def shapes(self) -> list[tuple]:
        return self.spec.shape_chain()

    def copy(self) -> "Model":
        return Model(self.spec, copy.deepcopy(self.params))

    def named_params(self):
        for i, p in enumerate(self.params):
            if p is not None:
                for name in sorted(p):
                    yield f"{i}.{name}", p[name]

    def effective_weights(self) -> list:
        return [layer.effective_weight(p) if layer.has_params else None
                for layer, p in zip(self.layers, self.params)]


def init_layer(layer: Layer, in_shape, rng: np.random.Generator):
    """Identity where the layer preserves size, random orthogonal otherwise."""
    if not layer.has_params:
        return None
    if layer.size_preserving(in_shape):
        return layer.init_identity(in_shape)
    return layer.init_orthogonal(in_shape, rng)


def init_identity(layer: Layer, in_shape) -> dict:
    return layer.init_identity(tuple(in_shape))


def init_orthogonal(layer: Layer, in_shape, rng_seed) -> dict:
    return layer.init_orthogonal(tuple(in_shape), np.random.default_rng(rng_seed))


def build_model(spec: ModelSpec | dict, seed: int = 0) -> Model:
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    shapes = spec.shape_chain()
    params = []
    for i, layer in enumerate(spec.layers):
        rng = np.random.default_rng([seed, i])
        params.append(init_layer(layer, shapes[i], rng))
    return Model(spec, params)


def _batch_input(model: Model, x) -> np.ndarray:
    x = as_tensor(x)
    if x.shape == model.input_shape:
        return x[None]
    if x.shape[1:] != model.input_shape:
        raise SpecError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def forward_with_cache(model: Model, x, weights=None):
    """Batched forward pass that keeps the per-layer caches for backprop."""
    h = _batch_input(model, x)
    if weights is None:
        weights = model.effective_weights()
    caches = []
    for i, (layer, p, w) in enumerate(zip(model.layers, model.params, weights)):
        try:
            h, cache = layer.forward(h, p, w)
        except ValueError as exc:
            raise SpecError(f"layer {i} ({layer.kind}): {exc}") from None
        caches.append(cache)
    return h, caches


def backward(model: Model, caches: list, dout):
    """Backpropagate ``dout``; return ``(dx, grads)`` with grads aligned to params."""
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        dout, grads[i] = model.layers[i].backward(dout, caches[i], model.params[i])
    return dout, grads


def forward(model: Model, x, batch_size: int | None = None) -> np.ndarray:
    """Logits for a single input or a batch. Output keeps the input's batching."""
    x = as_tensor(x)
    single = x.shape == model.input_shape
    xb = _batch_input(model, x)
    weights = model.effective_weights()
    step = batch_size or len(xb) or 1
    outs = [forward_with_cache(model, xb[i:i + step], weights)[0]
            for i in range(0, len(xb), step)]
    y = np.concatenate(outs) if outs else np.zeros((0,) + model.shapes()[-1])
    return y[0] if single else y
