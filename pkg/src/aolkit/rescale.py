"""AOL rescaling of dense matrices and convolution kernels.

For a parameter matrix ``P`` (rows = outputs, columns = inputs) the column
factors are ``D_i = (sum_j |P^T P|_ij) ** -0.5`` and ``W = P diag(D)`` has
spectral norm at most one. Columns whose absolute row sum is exactly zero get
``D_i = 0``.

For a kernel ``P`` of shape ``(k, k, c_in, c_out)`` the same bound is applied
to the Jacobian of the maximally padded convolution, whose Gram matrix is the
kernel self-correlation. This gives one factor per input channel that holds
for every padding mode and stride.

Both rescales come with a vector-Jacobian product so training can
differentiate through the factors.

``W`` does not change when ``P`` is multiplied by a positive constant. Inputs
whose largest entry lies outside ``[2**-SAFE_EXP, 2**SAFE_EXP]`` are first
scaled by a power of two (exact in floating point) so the Gram matrix neither
underflows nor overflows. ``exponent`` records that shift; ``gram`` and
``row_sums`` then belong to ``P * 2**-exponent``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from aolkit.tensor import ConvGeometry, Padding, as_tensor, conv2d
from aolkit.tensor import conv2d_backward_input, conv2d_backward_kernel


SAFE_EXP = 200


@dataclass(frozen=True)
class MatrixRescale:
    D: np.ndarray
    W: np.ndarray
    row_sums: np.ndarray
    gram: np.ndarray
    exponent: int = 0


@dataclass(frozen=True)
class KernelRescale:
    d: np.ndarray
    W: np.ndarray
    gram: np.ndarray  # (2k-1, 2k-1, c_in, c_in), centre at index k-1
    row_sums: np.ndarray
    exponent: int = 0


def _normalize(P: np.ndarray) -> tuple[np.ndarray, int]:
    """``(P * 2**-e, e)`` with ``e = 0`` unless the magnitude is extreme."""
    top = float(np.max(np.abs(P))) if P.size else 0.0
    if top == 0.0 or not np.isfinite(top) or 2.0 ** -SAFE_EXP <= top <= 2.0 ** SAFE_EXP:
        return P, 0
    e = math.frexp(top)[1] - 1
    return np.ldexp(P, -e), e


def _inverse_sqrt(s: np.ndarray, eps: float) -> np.ndarray:
    s = s + eps
    out = np.zeros_like(s)
    nz = s > 0.0
    out[nz] = 1.0 / np.sqrt(s[nz])
    return out


def rescale_matrix(P, eps: float = 0.0) -> MatrixRescale:
    """Column-rescale ``P`` so that ``P @ diag(D)`` is 1-Lipschitz.

    ``eps`` is added to the row sums before the inverse square root. Leave it
    at zero unless gradients must flow through (near-)zero columns.
    """
    P = as_tensor(P)
    if P.ndim != 2:
        raise ValueError(f"rescale_matrix expects a 2-D matrix, got shape {P.shape}")
    Q, e = _normalize(P)
    gram = Q.T @ Q
    row_sums = np.abs(gram).sum(axis=1)
    D = _inverse_sqrt(row_sums, eps)
    return MatrixRescale(D=np.ldexp(D, -e), W=Q * D, row_sums=row_sums, gram=gram, exponent=e)


def rescale_matrix_vjp(P, res: MatrixRescale, dW) -> np.ndarray:
    P, dW = as_tensor(P), as_tensor(dW)
    e = res.exponent
    Q, D = np.ldexp(P, -e), np.ldexp(res.D, e)
    dQ = dW * D
    dD = np.einsum("ni,ni->i", dW, Q)
    ds = np.where(D > 0, -0.5 * D ** 3, 0.0) * dD
    dG = np.sign(res.gram) * ds[:, None]
    return np.ldexp(dQ + Q @ (dG + dG.T), -e)


def _selfcorr_geometry(P: np.ndarray) -> ConvGeometry:
    k, _, ci, co = P.shape
    return ConvGeometry(k, 1, Padding.MAXIMAL, co, ci)


def kernel_self_correlation(P) -> np.ndarray:
    """``gram[u, v, a, c] = sum_{p,q,b} P[p,q,a,b] * P[p+u-k+1, q+v-k+1, c, b]``.

    Evaluated as a single maximally padded convolution in which the input
    channels of ``P`` act as the batch.
    """
    P = as_tensor(P)
    if P.ndim != 4:
        raise ValueError(f"kernel must be 4-D (k, k, c_in, c_out), got shape {P.shape}")
    images = P.transpose(2, 0, 1, 3)  # (c_in, k, k, c_out)
    kernel = P.transpose(0, 1, 3, 2)  # (k, k, c_out, c_in)
    out = conv2d(images, kernel, _selfcorr_geometry(P))
    # out[a, i, j, c] holds the shift -(i - k + 1) of channel pair (a, c)
    return np.ascontiguousarray(out[:, ::-1, ::-1, :].transpose(1, 2, 0, 3))


def rescale_kernel(P, eps: float = 0.0) -> KernelRescale:
    """Per-input-channel factors ``d`` and the rescaled kernel ``W``."""
    P = as_tensor(P)
    if P.ndim != 4 or P.shape[0] != P.shape[1]:
        raise ValueError(f"kernel must be 4-D (k, k, c_in, c_out), got shape {P.shape}")
    Q, e = _normalize(P)
    gram = kernel_self_correlation(Q)
    row_sums = np.abs(gram).sum(axis=(0, 1, 2))
    d = _inverse_sqrt(row_sums, eps)
    return KernelRescale(d=np.ldexp(d, -e), W=Q * d[None, None, :, None], gram=gram,
                         row_sums=row_sums, exponent=e)


def rescale_kernel_vjp(P, res: KernelRescale, dW) -> np.ndarray:
    P, dW = as_tensor(P), as_tensor(dW)
    e = res.exponent
    if e:
        Q = np.ldexp(P, -e)
        return np.ldexp(rescale_kernel_vjp(Q, KernelRescale(np.ldexp(res.d, e), res.W, res.gram,
                                                            res.row_sums), dW), -e)
    d = res.d
    dP = dW * d[None, None, :, None]
    dd = np.einsum("pqcb,pqcb->c", dW, P)
    ds = np.where(d > 0, -0.5 * d ** 3, 0.0) * dd
    dgram = np.sign(res.gram) * ds[None, None, None, :]
    # undo the flip/transpose of kernel_self_correlation
    dout = np.ascontiguousarray(dgram[::-1, ::-1].transpose(2, 0, 1, 3))
    geom = _selfcorr_geometry(P)
    k = P.shape[0]
    images = P.transpose(2, 0, 1, 3)
    kernel = P.transpose(0, 1, 3, 2)
    d_images = conv2d_backward_input(dout, kernel, geom, (k, k))
    d_kernel = conv2d_backward_kernel(images, dout, geom)
    return dP + d_images.transpose(1, 2, 0, 3) + d_kernel.transpose(0, 1, 3, 2)
