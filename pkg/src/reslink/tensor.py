"""Dense NHWC tensor kernels: convolution, max pooling, padding, matmul.

Feature maps are plain numpy arrays laid out as [batch, height, width,
channels] in float32 or float64.  Convolution is cross-correlation (no
kernel flip).  SAME padding produces ceil(extent / stride) outputs with the
smaller pad on the top/left side; VALID produces floor((extent - k) /
stride) + 1 and refuses windows larger than the input.

Every forward kernel has a hand-written backward counterpart.
``conv2d_reference`` is the slow nested-loop oracle that the fast
im2col-style path is tested against; it shares only the documented padding
convention, not the implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

SAME = "same"
VALID = "valid"


@dataclass(frozen=True)
class ConvSpec:
    """Window geometry for conv2d: kernel extents, stride and padding rule."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = SAME

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise DimensionError(
                f"kernel extents must be >= 1, got {self.kernel_h}x{self.kernel_w}"
            )
        if self.stride < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in (SAME, VALID):
            raise DimensionError(
                f"padding must be {SAME!r} or {VALID!r}, got {self.padding!r}"
            )


def conv_output_extent(extent: int, kernel: int, stride: int, padding: str) -> int:
    """Output extent along one spatial axis for the given padding rule."""
    if padding == SAME:
        return -(-extent // stride)
    if extent < kernel:
        raise DimensionError(
            f"window {kernel} larger than input extent {extent} under VALID padding"
        )
    return (extent - kernel) // stride + 1


def same_pad_amounts(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding for SAME; the smaller amount goes first."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def pad2d(x: np.ndarray, top: int, bottom: int, left: int, right: int,
          fill: float = 0.0) -> np.ndarray:
    """Pad the two spatial axes of an NHWC tensor with a constant fill."""
    _require_rank(x, 4, "pad2d input")
    if min(top, bottom, left, right) < 0:
        raise DimensionError(
            f"pad amounts must be >= 0, got ({top},{bottom},{left},{right})"
        )
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)),
                  mode="constant", constant_values=fill)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return a @ b


def _require_rank(x: np.ndarray, rank: int, what: str) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != rank:
        shape = getattr(x, "shape", type(x))
        raise DimensionError(f"{what} must be a rank-{rank} array, got {shape}")


def _padded_input(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Apply the ConvSpec padding mode; returns (padded, pad_top, pad_left)."""
    h, w = x.shape[1], x.shape[2]
    # VALID: just validate that the window fits.
    conv_output_extent(h, spec.kernel_h, spec.stride, spec.padding)
    conv_output_extent(w, spec.kernel_w, spec.stride, spec.padding)
    if spec.padding == VALID:
        return np.ascontiguousarray(x), 0, 0
    pt, pb = same_pad_amounts(h, spec.kernel_h, spec.stride)
    pl, pr = same_pad_amounts(w, spec.kernel_w, spec.stride)
    if pt == pb == pl == pr == 0:
        return np.ascontiguousarray(x), 0, 0
    return pad2d(x, pt, pb, pl, pr, 0.0), pt, pl


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only strided view [n, oh, ow, kh, kw, c] over a padded tensor."""
    n, hp, wp, c = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )


def _check_conv_args(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec) -> None:
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    if (kernel.shape[0], kernel.shape[1]) != (spec.kernel_h, spec.kernel_w):
        raise DimensionError(
            f"kernel array {kernel.shape} disagrees with spec "
            f"{spec.kernel_h}x{spec.kernel_w}"
        )
    if x.shape[3] != kernel.shape[2]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )


def conv2d(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate x [n,h,w,cin] with kernel [kh,kw,cin,cout].

    Implemented as a strided window view contracted against the kernel in a
    single tensordot, which keeps the accumulation order fixed for a given
    shape and thread count.
    """
    _check_conv_args(x, kernel, spec)
    xp, _, _ = _padded_input(x, spec)
    win = _window_view(xp, spec.kernel_h, spec.kernel_w, spec.stride)
    out = np.tensordot(win, kernel, axes=([3, 4, 5], [0, 1, 2]))
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input and kernel.

    grad_kernel contracts the window view with the upstream gradient;
    grad_input scatters upstream through each kernel offset with one strided
    slice-add per (ki, kj), which handles stride and SAME padding without an
    explicit col2im buffer.
    """
    _check_conv_args(x, kernel, spec)
    n, h, w, _ = x.shape
    kh, kw, cin, cout = kernel.shape
    oh = conv_output_extent(h, kh, spec.stride, spec.padding)
    ow = conv_output_extent(w, kw, spec.stride, spec.padding)
    if grad_out.shape != (n, oh, ow, cout):
        raise DimensionError(
            f"conv2d upstream gradient {grad_out.shape} does not match "
            f"output shape {(n, oh, ow, cout)}"
        )
    xp, pt, pl = _padded_input(x, spec)
    win = _window_view(xp, kh, kw, spec.stride)
    grad_kernel = np.tensordot(win, grad_out, axes=([0, 1, 2], [0, 1, 2]))

    grad_xp = np.zeros_like(xp)
    s = spec.stride
    for ki in range(kh):
        istop = ki + s * (oh - 1) + 1
        for kj in range(kw):
            jstop = kj + s * (ow - 1) + 1
            grad_xp[:, ki:istop:s, kj:jstop:s, :] += grad_out @ kernel[ki, kj].T
    grad_x = grad_xp[:, pt:pt + h, pl:pl + w, :]
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_kernel)


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct nested-loop convolution oracle.

    Deliberately naive: explicit loops over batch, output position, output
    channel and window, accumulating in float64.  Used by tests and by the
    area-attention reference path; never by the production model.
    """
    _check_conv_args(x, kernel, spec)
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    oh = conv_output_extent(h, kh, spec.stride, spec.padding)
    ow = conv_output_extent(w, kw, spec.stride, spec.padding)
    if spec.padding == SAME:
        pt, pb = same_pad_amounts(h, kh, spec.stride)
        pl, pr = same_pad_amounts(w, kw, spec.stride)
        xp = pad2d(x, pt, pb, pl, pr, 0.0)
    else:
        xp = x
    out = np.zeros((n, oh, ow, cout), dtype=x.dtype)
    for bi in range(n):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            for ci in range(cin):
                                acc += float(xp[bi, i * spec.stride + ki,
                                                j * spec.stride + kj, ci]) \
                                    * float(kernel[ki, kj, ci, co])
                    out[bi, i, j, co] = acc
    return out


def maxpool2d(x: np.ndarray, pool_h: int, pool_w: int, stride: int,
              padding: str = SAME) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; returns (output, argmax_indices).

    argmax_indices holds the window-local flat index (row-major over the
    pool window) of each winner, which is all the backward pass needs to
    route gradient.  SAME padding uses a -inf sentinel so padded positions
    can never win; ties resolve to the first position in scan order.
    """
    _require_rank(x, 4, "maxpool2d input")
    if pool_h < 1 or pool_w < 1 or stride < 1:
        raise DimensionError(
            f"pool window and stride must be >= 1, got {pool_h}x{pool_w}/{stride}"
        )
    if padding not in (SAME, VALID):
        raise DimensionError(f"padding must be {SAME!r} or {VALID!r}, got {padding!r}")
    n, h, w, c = x.shape
    oh = conv_output_extent(h, pool_h, stride, padding)
    ow = conv_output_extent(w, pool_w, stride, padding)
    if padding == SAME:
        pt, pb = same_pad_amounts(h, pool_h, stride)
        pl, pr = same_pad_amounts(w, pool_w, stride)
        xp = pad2d(x, pt, pb, pl, pr, -np.inf) if (pt or pb or pl or pr) else x
    else:
        xp = x
    win = _window_view(np.ascontiguousarray(xp), pool_h, pool_w, stride)
    flat = win.reshape(n, oh, ow, pool_h * pool_w, c)
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(x: np.ndarray, pool_h: int, pool_w: int, stride: int,
                       padding: str, argmax: np.ndarray,
                       grad_out: np.ndarray) -> np.ndarray:
    """Scatter upstream gradient to each window's argmax position."""
    _require_rank(x, 4, "maxpool2d input")
    n, h, w, c = x.shape
    oh = conv_output_extent(h, pool_h, stride, padding)
    ow = conv_output_extent(w, pool_w, stride, padding)
    if grad_out.shape != (n, oh, ow, c) or argmax.shape != (n, oh, ow, c):
        raise DimensionError(
            f"maxpool2d upstream/argmax shape {grad_out.shape}/{argmax.shape} "
            f"does not match output shape {(n, oh, ow, c)}"
        )
    if padding == SAME:
        pt, _ = same_pad_amounts(h, pool_h, stride)
        pl, _ = same_pad_amounts(w, pool_w, stride)
        pb = same_pad_amounts(h, pool_h, stride)[1]
        pr = same_pad_amounts(w, pool_w, stride)[1]
    else:
        pt = pl = pb = pr = 0
    grad_xp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=grad_out.dtype)
    for d in range(pool_h * pool_w):
        di, dj = divmod(d, pool_w)
        contrib = np.where(argmax == d, grad_out, 0)
        istop = di + stride * (oh - 1) + 1
        jstop = dj + stride * (ow - 1) + 1
        grad_xp[:, di:istop:stride, dj:jstop:stride, :] += contrib
    return np.ascontiguousarray(grad_xp[:, pt:pt + h, pl:pl + w, :])
