"""Dense float64 array primitives: matmul and 2-D cross-correlation.

Arrays are plain ``numpy.ndarray`` objects in float64. Images are laid out
channels-last, ``(h, w, c)`` or batched ``(n, h, w, c)``; kernels are
``(k, k, c_in, c_out)``.

The convolution is a cross-correlation::

    out[i, j, b] = sum_{p, q, a} P[p, q, a, b] * xpad[i*s + p, j*s + q, a]
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Padding(str, enum.Enum):
    SAME = "same"  # zero pad k-1 total: floor((k-1)/2) before, ceil after
    VALID = "valid"
    MAXIMAL = "maximal"  # k-1 zeros on every side

    @classmethod
    def parse(cls, value: "Padding | str") -> "Padding":
        if isinstance(value, Padding):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown padding mode {value!r}") from None


@dataclass(frozen=True)
class ConvGeometry:
    kernel_size: int
    stride: int = 1
    padding: Padding = Padding.SAME
    in_channels: int | None = None
    out_channels: int | None = None

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be positive")
        object.__setattr__(self, "padding", Padding.parse(self.padding))

    def pad_amounts(self) -> tuple[int, int]:
        k = self.kernel_size
        if self.padding is Padding.SAME:
            return (k - 1) // 2, k // 2
        if self.padding is Padding.MAXIMAL:
            return k - 1, k - 1
        return 0, 0

    def output_size(self, n: int) -> int:
        before, after = self.pad_amounts()
        extent = n + before + after
        if extent < self.kernel_size:
            raise ValueError(
                f"padded extent {extent} smaller than kernel size {self.kernel_size}"
            )
        return (extent - self.kernel_size) // self.stride + 1


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (h, w, c) or (n, h, w, c) input, got shape {x.shape}")


def _check_kernel(P: np.ndarray, geom: ConvGeometry) -> None:
    if P.ndim != 4 or P.shape[0] != P.shape[1]:
        raise ValueError(f"kernel must have shape (k, k, c_in, c_out), got {P.shape}")
    if P.shape[0] != geom.kernel_size:
        raise ValueError(
            f"kernel size {P.shape[0]} does not match geometry ({geom.kernel_size})"
        )
    if geom.in_channels is not None and P.shape[2] != geom.in_channels:
        raise ValueError(f"kernel has {P.shape[2]} input channels, geometry {geom.in_channels}")
    if geom.out_channels is not None and P.shape[3] != geom.out_channels:
        raise ValueError(f"kernel has {P.shape[3]} output channels, geometry {geom.out_channels}")


def _pad(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    before, after = geom.pad_amounts()
    if before == after == 0:
        return x
    return np.pad(x, ((0, 0), (before, after), (before, after), (0, 0)))


def _taps(k: int, s: int, ho: int, wo: int):
    for p in range(k):
        for q in range(k):
            yield p, q, slice(p, p + s * (ho - 1) + 1, s), slice(q, q + s * (wo - 1) + 1, s)


def conv2d(x, P, geom: ConvGeometry) -> np.ndarray:
    """Cross-correlate ``x`` with kernel ``P`` under ``geom``."""
    x, P = as_tensor(x), as_tensor(P)
    _check_kernel(P, geom)
    xb, squeeze = _batched(x)
    if xb.shape[3] != P.shape[2]:
        raise ValueError(
            f"input has {xb.shape[3]} channels but kernel expects {P.shape[2]}"
        )
    n, h, w, _ = xb.shape
    k, s = geom.kernel_size, geom.stride
    ho, wo = geom.output_size(h), geom.output_size(w)
    xp = _pad(xb, geom)
    out = np.zeros((n, ho, wo, P.shape[3]))
    for p, q, rows, cols in _taps(k, s, ho, wo):
        out += xp[:, rows, cols, :] @ P[p, q]
    return out[0] if squeeze else out


def conv2d_backward_input(dy, P, geom: ConvGeometry, input_hw: tuple[int, int]) -> np.ndarray:
    """Transpose of :func:`conv2d` with respect to its input."""
    dy, P = as_tensor(dy), as_tensor(P)
    dyb, squeeze = _batched(dy)
    n, ho, wo, _ = dyb.shape
    h, w = input_hw
    k, s = geom.kernel_size, geom.stride
    before, after = geom.pad_amounts()
    dxp = np.zeros((n, h + before + after, w + before + after, P.shape[2]))
    for p, q, rows, cols in _taps(k, s, ho, wo):
        dxp[:, rows, cols, :] += dyb @ P[p, q].T
    dx = dxp[:, before:before + h, before:before + w, :]
    return dx[0] if squeeze else dx


def conv2d_backward_kernel(x, dy, geom: ConvGeometry) -> np.ndarray:
    """Gradient of ``sum(dy * conv2d(x, P))`` with respect to ``P``."""
    x, dy = as_tensor(x), as_tensor(dy)
    xb, _ = _batched(x)
    dyb, _ = _batched(dy)
    _, ho, wo, co = dyb.shape
    ci = xb.shape[3]
    k, s = geom.kernel_size, geom.stride
    xp = _pad(xb, geom)
    dy2 = dyb.reshape(-1, co)
    dP = np.empty((k, k, ci, co))
    for p, q, rows, cols in _taps(k, s, ho, wo):
        dP[p, q] = xp[:, rows, cols, :].reshape(-1, ci).T @ dy2
    return dP
