"""Minimal tensor engine with reverse-mode differentiation.

Tensors are numpy arrays plus an optional gradient buffer.  Ops record
their backward closures on a Tape in execution order; Tape.backward walks
the records in exact reverse order and accumulates gradients additively at
fan-out.

Convolutions and pooling run internally in channels-last layout and are
lowered to patch-matrix products processed in cache-sized row chunks, so
training stays BLAS-bound on machines with little memory bandwidth.  The
public spatial ops take the conventional N x C x H x W layout and wrap the
channels-last kernels in transposes.

float32 is the training precision; gradient checking builds float64
tensors and the ops follow the input dtype.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3

# Patch-matrix chunks are sized to stay resident in the last-level cache.
_CHUNK_TARGET_BYTES = 4 << 20

_debug_finite_checks = False

# Reusable per-op scratch buffers keyed by role; avoids repeated large
# allocations (fresh pages cost a zero-fill pass on this class of machine).
_workspaces: dict = {}


def _workspace(key: str, shape: tuple, dtype) -> np.ndarray:
    size = int(np.prod(shape))
    buf = _workspaces.get((key, np.dtype(dtype).str))
    if buf is None or buf.size < size:
        buf = np.empty(size, dtype=dtype)
        _workspaces[(key, np.dtype(dtype).str)] = buf
    return buf[:size].reshape(shape)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


def set_debug_finite_checks(enabled: bool) -> None:
    """When enabled, every op asserts its output is finite (NaN tripwire)."""
    global _debug_finite_checks
    _debug_finite_checks = enabled


def _finite_check(values: np.ndarray, op_name: str) -> None:
    if _debug_finite_checks and not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite values produced by {op_name}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self.grad is None:
            # Backward closures hand over freshly computed buffers; views are
            # safe to adopt because completed gradients are never reassigned.
            self.grad = delta if delta.dtype == self.data.dtype else delta.astype(self.data.dtype)
        else:
            self.grad += delta

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Trainable tensor with named identity and Adam moment state."""

    def __init__(self, data: np.ndarray, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.t = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape})"


@dataclass
class _TapeRecord:
    output: Tensor
    inputs: tuple
    backward_fn: object  # callable(output_grad) -> None, accumulates into inputs


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self._records: list[_TapeRecord] = []

    def record(self, output: Tensor, inputs: tuple, backward_fn) -> None:
        self._records.append(_TapeRecord(output, inputs, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Seed the root gradient and traverse records in reverse order."""
        root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.dtype).copy()
        for rec in reversed(self._records):
            if rec.output.grad is None:
                continue
            rec.backward_fn(rec.output.grad)


def _track(tape: Tape | None, inputs: tuple) -> bool:
    return tape is not None and any(t.requires_grad for t in inputs)


def _make_output(values: np.ndarray, tracked: bool, op_name: str) -> Tensor:
    _finite_check(values, op_name)
    return Tensor(values, requires_grad=tracked)


def permute(tape: Tape | None, x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    tracked = _track(tape, (x,))
    out = _make_output(x.data.transpose(axes), tracked, "permute")
    if tracked:

        def backward(grad_out):
            x.accumulate_grad(grad_out.transpose(inverse))

        tape.record(out, (x,), backward)
    return out


# --------------------------------------------------------------------------
# Convolution (channels-last core)
# --------------------------------------------------------------------------

def _pad_amounts(dim: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_dim, pad_before, pad_after) for one spatial axis."""
    if padding == "same":
        out = -(-dim // stride)  # ceil
        total = max((out - 1) * stride + k - dim, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if k > dim:
            raise ShapeError(f"kernel {k} exceeds input dim {dim} with valid padding")
        return (dim - k) // stride + 1, 0, 0
    raise ShapeError(f"unknown padding mode {padding!r}")


def _row_blocks(out_h: int, row_bytes: int):
    """Split output rows into blocks whose patch matrices stay cache-sized."""
    rows = max(1, _CHUNK_TARGET_BYTES // max(row_bytes, 1))
    for r0 in range(0, out_h, rows):
        yield r0, min(r0 + rows, out_h)


def _patch_block(win: np.ndarray, ni: int, r0: int, r1: int, stride: int, out_w: int, ws_key: str) -> np.ndarray:
    """Contiguous (rows, out_w, kh, kw, C) patch block for one sample.

    `win` is the sliding-window view of the padded NHWC input with axes
    (N, H*, W*, C, kh, kw); the kernel axes are moved in front of the
    channel axis so patch rows match the (kh, kw, C)-flattened weights.
    The block is copied into a reused workspace buffer.
    """
    block = win[ni, r0 * stride : (r1 - 1) * stride + 1 : stride, ::stride, :, :, :][:, :out_w]
    block = block.transpose(0, 1, 3, 4, 2)
    out = _workspace(ws_key, block.shape, block.dtype)
    np.copyto(out, block)
    return out


def _plain_corr(src: np.ndarray, w_back: np.ndarray, kh: int, kw: int, out_c: int) -> np.ndarray:
    """Stride-1 correlation of a pre-padded NHWC array with a (kh*kw*C, F) matrix."""
    n, hs, ws_, _ = src.shape
    oh = hs - kh + 1
    ow = ws_ - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(src, (kh, kw), axis=(1, 2))
    k = w_back.shape[0]
    out = np.empty((n * oh * ow, out_c), dtype=src.dtype)
    row_bytes = ow * k * src.itemsize
    for ni in range(n):
        for r0, r1 in _row_blocks(oh, row_bytes):
            cols = _patch_block(win, ni, r0, r1, 1, ow, "conv.cols").reshape((r1 - r0) * ow, k)
            np.dot(cols, w_back, out=out[(ni * oh + r0) * ow : (ni * oh + r1) * ow])
    return out.reshape(n, oh, ow, out_c)


def conv2d_nhwc(
    tape: Tape | None,
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation of (N,H,W,C) input with (F,C,kh,kw) kernels."""
    n, h, w, c = x.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels, got {c}")
    out_h, pt, pb = _pad_amounts(h, kh, stride, padding)
    out_w, pl, pr = _pad_amounts(w, kw, stride, padding)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ShapeError(f"kernel {kh}x{kw} exceeds padded input {h + pt + pb}x{w + pl + pr}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    k = c * kh * kw
    w_mat = np.ascontiguousarray(kernels.data.transpose(0, 2, 3, 1).reshape(f, k).T)  # (K, F)
    out_mat = np.empty((n * out_h * out_w, f), dtype=x.dtype)
    row_bytes = out_w * k * x.data.itemsize
    for ni in range(n):
        for r0, r1 in _row_blocks(out_h, row_bytes):
            cols = _patch_block(win, ni, r0, r1, stride, out_w, "conv.cols").reshape((r1 - r0) * out_w, k)
            sl = slice((ni * out_h + r0) * out_w, (ni * out_h + r1) * out_w)
            np.dot(cols, w_mat, out=out_mat[sl])
            if bias is not None:
                out_mat[sl] += bias.data
    values = out_mat.reshape(n, out_h, out_w, f)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    tracked = _track(tape, inputs)
    out = _make_output(values, tracked, "conv2d")
    if tracked:

        def backward(grad_out):
            g_mat = grad_out.reshape(n * out_h * out_w, f)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g_mat.sum(axis=0))
            need_dw = kernels.requires_grad
            need_dx = x.requires_grad
            if need_dw:
                dw_flat = np.zeros((k, f), dtype=x.dtype)
                for ni in range(n):
                    for r0, r1 in _row_blocks(out_h, row_bytes):
                        rows = (r1 - r0) * out_w
                        g_chunk = g_mat[(ni * out_h + r0) * out_w : (ni * out_h + r1) * out_w]
                        cols = _patch_block(win, ni, r0, r1, stride, out_w, "conv.cols").reshape(rows, k)
                        dw_tmp = _workspace("conv.dwtmp", (k, f), x.dtype)
                        np.dot(cols.T, g_chunk, out=dw_tmp)
                        dw_flat += dw_tmp
                kernels.accumulate_grad(
                    np.ascontiguousarray(dw_flat.T.reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
                )
            if need_dx and stride == 1:
                # transposed convolution as a plain correlation with the
                # flipped kernel: streams once instead of 9 strided passes;
                # the padded grad is sliced so only the kept rows/cols of
                # the input gradient are ever computed
                if kh > 1 or kw > 1:
                    gp = _workspace(
                        "conv.gp", (n, out_h + 2 * (kh - 1), out_w + 2 * (kw - 1), f), grad_out.dtype
                    )
                    gp[:, : kh - 1] = 0.0
                    gp[:, out_h + kh - 1 :] = 0.0
                    gp[:, :, : kw - 1] = 0.0
                    gp[:, :, out_w + kw - 1 :] = 0.0
                    gp[:, kh - 1 : out_h + kh - 1, kw - 1 : out_w + kw - 1] = grad_out
                    gp = gp[:, pt : pt + h + kh - 1, pl : pl + w + kw - 1]
                else:
                    gp = grad_out
                w_back = np.ascontiguousarray(
                    kernels.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
                )
                x.accumulate_grad(_plain_corr(gp, w_back, kh, kw, c))
            elif need_dx:
                dxp = np.zeros_like(xp)
                for ni in range(n):
                    for r0, r1 in _row_blocks(out_h, row_bytes):
                        rows = (r1 - r0) * out_w
                        g_chunk = g_mat[(ni * out_h + r0) * out_w : (ni * out_h + r1) * out_w]
                        dpatch = _workspace("conv.dpatch", (rows, k), x.dtype)
                        np.dot(g_chunk, w_mat.T, out=dpatch)
                        dpatch = dpatch.reshape(r1 - r0, out_w, kh, kw, c)
                        for a in range(kh):
                            base = r0 * stride + a
                            for b in range(kw):
                                dxp[ni, base : base + (r1 - r0) * stride : stride,
                                    b : b + out_w * stride : stride] += dpatch[:, :, a, b]
                x.accumulate_grad(dxp[:, pt : pt + h, pl : pl + w])

        tape.record(out, inputs, backward)
    return out


def depthwise_separable_conv2d_nhwc(
    tape: Tape | None,
    x: Tensor,
    depth_kernels: Tensor,
    point_kernels: Tensor,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """Per-channel spatial filtering followed by 1x1 cross-channel mixing."""
    n, h, w, c = x.shape
    dc, kh, kw = depth_kernels.shape
    f, pc = point_kernels.shape
    if dc != c or pc != c:
        raise ShapeError(f"depthwise expects {c} channels, got depth={dc}, point={pc}")
    out_h, pt, pb = _pad_amounts(h, kh, stride, padding)
    out_w, pl, pr = _pad_amounts(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    kk = kh * kw
    dk_flat = depth_kernels.data.reshape(c, kk).T  # (KK, C)
    pk_t = point_kernels.data.T  # (C, F)
    depth_mat = np.empty((n * out_h * out_w, c), dtype=x.dtype)
    out_mat = np.empty((n * out_h * out_w, f), dtype=x.dtype)
    row_bytes = out_w * c * kk * x.data.itemsize
    for ni in range(n):
        for r0, r1 in _row_blocks(out_h, row_bytes):
            block = _patch_block(win, ni, r0, r1, stride, out_w, "dsconv.block")
            rows = (r1 - r0) * out_w
            d = (block.reshape(rows, kk, c) * dk_flat[None, :, :]).sum(axis=1)
            sl = slice((ni * out_h + r0) * out_w, (ni * out_h + r1) * out_w)
            depth_mat[sl] = d
            np.dot(d, pk_t, out=out_mat[sl])
    values = out_mat.reshape(n, out_h, out_w, f)

    inputs = (x, depth_kernels, point_kernels)
    tracked = _track(tape, inputs)
    out = _make_output(values, tracked, "depthwise_separable_conv2d")
    if tracked:

        def backward(grad_out):
            g_mat = grad_out.reshape(n * out_h * out_w, f)
            if point_kernels.requires_grad:
                point_kernels.accumulate_grad(g_mat.T @ depth_mat)
            d_depth = g_mat @ point_kernels.data  # (N*P, C)
            need_dk = depth_kernels.requires_grad
            need_dx = x.requires_grad
            ddk = np.zeros((kk, c), dtype=x.dtype) if need_dk else None
            dxp = np.zeros_like(xp) if need_dx else None
            for ni in range(n):
                for r0, r1 in _row_blocks(out_h, row_bytes):
                    rows = (r1 - r0) * out_w
                    sl = slice((ni * out_h + r0) * out_w, (ni * out_h + r1) * out_w)
                    dd = d_depth[sl]
                    if need_dk:
                        block = _patch_block(win, ni, r0, r1, stride, out_w, "dsconv.block").reshape(rows, kk, c)
                        ddk += (block * dd[:, None, :]).sum(axis=0)
                    if need_dx:
                        dpatch = (dd[:, None, :] * dk_flat[None, :, :]).reshape(
                            r1 - r0, out_w, kh, kw, c
                        )
                        for a in range(kh):
                            base = r0 * stride + a
                            for b in range(kw):
                                dxp[ni, base : base + (r1 - r0) * stride : stride,
                                    b : b + out_w * stride : stride] += dpatch[:, :, a, b]
            if need_dk:
                depth_kernels.accumulate_grad(np.ascontiguousarray(ddk.T).reshape(depth_kernels.shape))
            if need_dx:
                x.accumulate_grad(dxp[:, pt : pt + h, pl : pl + w])

        tape.record(out, inputs, backward)
    return out


# --------------------------------------------------------------------------
# Normalization, activations, pooling (channels-last core)
# --------------------------------------------------------------------------

class BatchNormState:
    """Running statistics shared between train and eval passes."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_seen = 0


def batchnorm2d_nhwc(
    tape: Tape | None,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
    inplace: bool = False,
) -> Tensor:
    n, h, w, c = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 1, 2)
    if training:
        if n * h * w < 2:
            raise ShapeError("batchnorm training needs at least 2 values per channel")
        mean = x.data.mean(axis=axes, dtype=np.float64).astype(x.dtype)
        var = x.data.var(axis=axes, dtype=np.float64).astype(x.dtype)
        state.running_mean = (momentum * state.running_mean + (1.0 - momentum) * mean).astype(
            state.running_mean.dtype
        )
        state.running_var = (momentum * state.running_var + (1.0 - momentum) * var).astype(
            state.running_var.dtype
        )
        state.batches_seen += 1
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = (x.data - mean) * inv_std
    if inplace:
        # safe when the producer's backward never reads its own output
        values = np.multiply(x_hat, gamma.data, out=x.data)
        values += beta.data
    else:
        values = gamma.data * x_hat + beta.data

    inputs = (x, gamma, beta)
    tracked = _track(tape, inputs)
    out = _make_output(values, tracked, "batchnorm2d")
    if tracked:
        m = n * h * w

        def backward(grad_out):
            if gamma.requires_grad:
                gamma.accumulate_grad((grad_out * x_hat).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(grad_out.sum(axis=axes))
            if x.requires_grad:
                # grad_out is dead after this record; reuse it for dxhat/dx
                dxhat = np.multiply(grad_out, gamma.data, out=grad_out)
                if training:
                    sum_dxhat = dxhat.sum(axis=axes)
                    sum_dxhat_xhat = (dxhat * x_hat).sum(axis=axes)
                    dxhat -= sum_dxhat / m
                    dxhat -= x_hat * (sum_dxhat_xhat / m)
                dxhat *= inv_std
                x.accumulate_grad(dxhat)

        tape.record(out, (x, gamma, beta), backward)
    return out


def relu(tape: Tape | None, x: Tensor, inplace: bool = False) -> Tensor:
    if inplace:
        values = np.maximum(x.data, 0, out=x.data)
    else:
        values = np.maximum(x.data, 0)
    tracked = _track(tape, (x,))
    out = _make_output(values, tracked, "relu")
    if tracked:
        mask = values > 0  # subgradient at 0 defined as 0

        def backward(grad_out):
            # grad_out is never read again once this record fires
            np.multiply(grad_out, mask, out=grad_out)
            x.accumulate_grad(grad_out)

        tape.record(out, (x,), backward)
    return out


def maxpool2d_nhwc(tape: Tape | None, x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    if window == stride:
        return _maxpool_tiled(tape, x, window, out_h, out_w)

    def view(arr, a, b):
        return arr[:, a : a + stride * (out_h - 1) + 1 : stride, b : b + stride * (out_w - 1) + 1 : stride, :]

    values = np.array(view(x.data, 0, 0))
    for a in range(window):
        for b in range(window):
            if a or b:
                np.maximum(values, view(x.data, a, b), out=values)

    tracked = _track(tape, (x,))
    out = _make_output(values, tracked, "maxpool2d")
    if tracked:

        def backward(grad_out):
            dx = np.zeros_like(x.data)
            claimed = np.zeros(values.shape, dtype=bool)
            for a in range(window):
                for b in range(window):
                    hit = view(x.data, a, b) == values
                    np.logical_and(hit, ~claimed, out=hit)  # first window slot wins ties
                    view(dx, a, b)[...] += grad_out * hit
                    claimed |= hit
            x.accumulate_grad(dx)

        tape.record(out, (x,), backward)
    return out


def _maxpool_tiled(tape: Tape | None, x: Tensor, window: int, out_h: int, out_w: int) -> Tensor:
    """Non-overlapping pooling via strided views; no patch materialization."""
    n, h, w, c = x.shape
    tiles = x.data[:, : out_h * window, : out_w * window, :].reshape(
        n, out_h, window, out_w, window, c
    )
    values = tiles.max(axis=(2, 4))

    tracked = _track(tape, (x,))
    out = _make_output(values, tracked, "maxpool2d")
    if tracked:

        def backward(grad_out):
            crop_h, crop_w = out_h * window, out_w * window
            dcrop = np.zeros((n, crop_h, crop_w, c), dtype=x.dtype)
            dtiles = dcrop.reshape(n, out_h, window, out_w, window, c)
            claimed = np.zeros((n, out_h, out_w, c), dtype=bool)
            for a in range(window):
                for b in range(window):
                    hit = tiles[:, :, a, :, b, :] == values
                    np.logical_and(hit, ~claimed, out=hit)  # first tile in scan order wins ties
                    dtiles[:, :, a, :, b, :] = grad_out * hit
                    claimed |= hit
            if crop_h == h and crop_w == w:
                x.accumulate_grad(dcrop)
            else:
                dx = np.zeros_like(x.data)
                dx[:, :crop_h, :crop_w, :] = dcrop
                x.accumulate_grad(dx)

        tape.record(out, (x,), backward)
    return out


def _adaptive_bounds(size: int, out: int) -> list[tuple[int, int]]:
    return [(int(np.floor(i * size / out)), int(np.ceil((i + 1) * size / out))) for i in range(out)]


def adaptive_avg_pool2d_nhwc(tape: Tape | None, x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over a grid of equal-as-possible intervals; works for any H,W >= 1."""
    n, h, w, c = x.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ShapeError("adaptive pool needs positive dimensions")
    hb = _adaptive_bounds(h, out_h)
    wb = _adaptive_bounds(w, out_w)
    values = np.empty((n, out_h, out_w, c), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            values[:, i, j, :] = x.data[:, h0:h1, w0:w1, :].mean(axis=(1, 2))

    tracked = _track(tape, (x,))
    out = _make_output(values, tracked, "adaptive_avg_pool2d")
    if tracked:

        def backward(grad_out):
            dx = np.zeros_like(x.data)
            for i, (h0, h1) in enumerate(hb):
                for j, (w0, w1) in enumerate(wb):
                    area = (h1 - h0) * (w1 - w0)
                    dx[:, h0:h1, w0:w1, :] += grad_out[:, i : i + 1, j : j + 1, :] / area
            x.accumulate_grad(dx)

        tape.record(out, (x,), backward)
    return out


# --------------------------------------------------------------------------
# Public N x C x H x W spatial ops
# --------------------------------------------------------------------------

_TO_NHWC = (0, 2, 3, 1)
_TO_NCHW = (0, 3, 1, 2)


def conv2d(tape, x, kernels, bias, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of (N,C,H,W) with (F,C,kh,kw) kernels."""
    xh = permute(tape, x, _TO_NHWC)
    yh = conv2d_nhwc(tape, xh, kernels, bias, stride, padding)
    return permute(tape, yh, _TO_NCHW)


def depthwise_separable_conv2d(tape, x, depth_kernels, point_kernels, stride: int = 1, padding: str = "same") -> Tensor:
    xh = permute(tape, x, _TO_NHWC)
    yh = depthwise_separable_conv2d_nhwc(tape, xh, depth_kernels, point_kernels, stride, padding)
    return permute(tape, yh, _TO_NCHW)


def batchnorm2d(tape, x, gamma, beta, state, training, momentum=BN_MOMENTUM, epsilon=BN_EPSILON) -> Tensor:
    xh = permute(tape, x, _TO_NHWC)
    yh = batchnorm2d_nhwc(tape, xh, gamma, beta, state, training, momentum, epsilon)
    return permute(tape, yh, _TO_NCHW)


def maxpool2d(tape, x, window: int = 3, stride: int = 2) -> Tensor:
    xh = permute(tape, x, _TO_NHWC)
    yh = maxpool2d_nhwc(tape, xh, window, stride)
    return permute(tape, yh, _TO_NCHW)


def adaptive_avg_pool2d(tape, x, out_h: int, out_w: int) -> Tensor:
    xh = permute(tape, x, _TO_NHWC)
    yh = adaptive_avg_pool2d_nhwc(tape, xh, out_h, out_w)
    return permute(tape, yh, _TO_NCHW)


# --------------------------------------------------------------------------
# Dense head
# --------------------------------------------------------------------------

def flatten(tape: Tape | None, x: Tensor) -> Tensor:
    n = x.shape[0]
    values = x.data.reshape(n, -1)
    tracked = _track(tape, (x,))
    out = _make_output(values, tracked, "flatten")
    if tracked:

        def backward(grad_out):
            x.accumulate_grad(grad_out.reshape(x.shape))

        tape.record(out, (x,), backward)
    return out


def dense(tape: Tape | None, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense expects (N, {weights.shape[0]}), got {x.shape}")
    values = x.data @ weights.data + bias.data
    inputs = (x, weights, bias)
    tracked = _track(tape, inputs)
    out = _make_output(values, tracked, "dense")
    if tracked:

        def backward(grad_out):
            if weights.requires_grad:
                weights.accumulate_grad(x.data.T @ grad_out)
            if bias.requires_grad:
                bias.accumulate_grad(grad_out.sum(axis=0))
            if x.requires_grad:
                x.accumulate_grad(grad_out @ weights.data.T)

        tape.record(out, inputs, backward)
    return out


def dropout(tape: Tape | None, x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    values = x.data * keep
    tracked = _track(tape, (x,))
    out = _make_output(values, tracked, "dropout")
    if tracked:

        def backward(grad_out):
            x.accumulate_grad(grad_out * keep)

        tape.record(out, (x,), backward)
    return out


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(tape: Tape | None, logits: Tensor, one_hot_targets: np.ndarray) -> Tensor:
    targets = np.asarray(one_hot_targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    is_one = targets == 1.0
    if not (np.all((targets == 0.0) | is_one) and np.all(is_one.sum(axis=1) == 1)):
        raise ValueError("target rows must be one-hot")

    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss_value = -(targets * log_probs).sum() / n
    tracked = _track(tape, (logits,))
    out = _make_output(np.asarray(loss_value, dtype=logits.dtype), tracked, "softmax_cross_entropy")
    if tracked:
        probs = np.exp(log_probs)

        def backward(grad_out):
            logits.accumulate_grad(grad_out * (probs - targets) / n)

        tape.record(out, (logits,), backward)
    return out


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

_ADAM_BLOCK = 1 << 18  # elements per update block; keeps all passes cache-hot


def adam_step(
    params: list[Parameter],
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> None:
    """One Adam update over params whose tensors hold gradients.

    The element-wise update runs in cache-sized blocks with a shared
    scratch buffer: parameter arrays dominate memory traffic at desk
    scale, so each array should cross DRAM once per step, not once per
    intermediate.
    """
    for p in params:
        grad = p.tensor.grad
        if grad is None:
            continue
        if grad.shape != p.tensor.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape {p.tensor.shape}")
        p.t += 1
        c1 = 1.0 - beta1
        c2 = 1.0 - beta2
        step_scale = lr / (1.0 - beta1**p.t)
        v_scale = 1.0 / (1.0 - beta2**p.t)
        g = grad.reshape(-1)
        m = p.m.reshape(-1)
        v = p.v.reshape(-1)
        theta = p.tensor.data.reshape(-1)
        scratch = _workspace("adam.scratch", (min(_ADAM_BLOCK, g.size),), g.dtype)
        for i in range(0, g.size, _ADAM_BLOCK):
            sl = slice(i, min(i + _ADAM_BLOCK, g.size))
            s = scratch[: sl.stop - sl.start]
            gb, mb, vb = g[sl], m[sl], v[sl]
            np.multiply(gb, c1, out=s)
            mb *= beta1
            mb += s
            np.multiply(gb, gb, out=s)
            s *= c2
            vb *= beta2
            vb += s
            np.multiply(vb, v_scale, out=s)
            np.sqrt(s, out=s)
            s += epsilon
            np.divide(mb, s, out=s)
            s *= step_scale
            theta[sl] -= s


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(op_fn, inputs: list[Tensor], step: float = 1e-4, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    op_fn(tape, *inputs) must return a Tensor; its output is reduced to a
    scalar through a fixed random projection so a single backward pass
    yields every analytic gradient.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    tape = Tape()
    out = op_fn(tape, *inputs)
    projection = rng.standard_normal(out.shape)
    tape.backward(out, seed=projection)

    def objective():
        return float(np.sum(op_fn(None, *inputs).data * projection))

    worst = 0.0
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = objective()
            flat[i] = original - step
            lower = objective()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * step)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Checkpoints (binary container "YMCK")
# --------------------------------------------------------------------------

YMCK_MAGIC = b"YMCK"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(YMCK_MAGIC + struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            payload = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<B", payload.ndim))
            fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            fh.write(payload.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != YMCK_MAGIC:
        raise ValueError(f"{path}: not a YMCK checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return arrays
