"""2D convolution and pooling over channels-first maps, with autodiff rules.

Convolution uses the cross-correlation convention (no kernel flip),
zero-padded borders, and an im2col + matmul implementation.  All ops accept a
single map (C, H, W) or a batch (N, C, H, W); the batch axis is an internal
extension, the single-map contract is unchanged.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, ShapeError, _emit, as_tensor


def _pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = int(v[0]), int(v[1])
    else:
        a = b = int(v)
    if name == "stride" and (a < 1 or b < 1):
        raise ShapeError(f"stride must be >= 1, got {(a, b)}")
    if name == "padding" and (a < 0 or b < 0):
        raise ShapeError(f"padding must be >= 0, got {(a, b)}")
    return a, b


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


def _out_dim(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x4: np.ndarray, k1: int, k2: int, ph: int, pw: int,
            sh: int, sw: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k1*k2, OH*OW) patch matrix."""
    n, c, h, w = x4.shape
    oh, ow = _out_dim(h, k1, ph, sh), _out_dim(w, k2, pw, sw)
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (k1, k2), axis=(2, 3))[:, :, ::sh, ::sw]
    # (N, C, OH, OW, k1, k2) -> (N, C, k1, k2, OH, OW) -> flat patches
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k1 * k2, oh * ow)


def _col2im(dcols: np.ndarray, xshape: tuple, k1: int, k2: int, ph: int, pw: int,
            sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Accumulate patch-matrix gradients back onto the (N, C, H, W) input."""
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    dwin = dcols.reshape(n, c, k1, k2, oh, ow)
    for i in range(k1):
        for j in range(k2):
            dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += dwin[:, :, i, j]
    return dxp[:, :, ph:ph + h, pw:pw + w]


def conv2d_multi(x, kernels, biases, padding=0, stride=1) -> tuple:
    """Convolve one input with several kernel stacks sharing a single im2col.

    ``kernels`` is a sequence of (C_out_i, C_in, k1, k2) tensors with a common
    spatial size; ``biases`` aligns with it (entries may be None).  Returns one
    output map per kernel stack.  ``conv2d`` is the single-kernel case.
    """
    x = as_tensor(x)
    kernels = [as_tensor(k) for k in kernels]
    biases = [None if b is None else as_tensor(b) for b in biases]
    if len(kernels) != len(biases) or not kernels:
        raise ShapeError("conv2d: kernels and biases must align and be non-empty")
    ph, pw = _pair(padding, "padding")
    sh, sw = _pair(stride, "stride")

    x4, squeeze = _as_batched(x.data)
    n, c_in, h, w = x4.shape
    k1, k2 = kernels[0].shape[2], kernels[0].shape[3]
    for k in kernels:
        if k.ndim != 4 or k.shape[1] != c_in:
            raise ShapeError(
                f"conv2d: kernel {k.shape} incompatible with input channels {c_in}")
        if k.shape[2:] != (k1, k2):
            raise ShapeError("conv2d: all kernels must share one spatial size")
    for k, b in zip(kernels, biases):
        if b is not None and b.shape != (k.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} must be ({k.shape[0]},)")
    if k1 > h + 2 * ph or k2 > w + 2 * pw:
        raise ShapeError(
            f"conv2d: kernel {(k1, k2)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    oh, ow = _out_dim(h, k1, ph, sh), _out_dim(w, k2, pw, sw)
    splits = np.cumsum([k.shape[0] for k in kernels])[:-1]

    def forward():
        cols = _im2col(x4, k1, k2, ph, pw, sh, sw)
        kmat = np.concatenate([k.data.reshape(k.shape[0], -1) for k in kernels])
        out = np.matmul(kmat, cols)  # (N, sum C_out, OH*OW)
        outs = []
        for part, b in zip(np.split(out, splits, axis=1), biases):
            y = part.reshape(n, -1, oh, ow)
            if b is not None:
                y = y + b.data[:, None, None]
            outs.append(y[0] if squeeze else y)
        return tuple(outs)

    def backward_builder(outs):
        def bwd(gs):
            g4s = [g[None] if squeeze else g for g in gs]
            gmat = np.concatenate(
                [g.reshape(n, g.shape[1], oh * ow) for g in g4s], axis=1)
            cols = _im2col(x4, k1, k2, ph, pw, sh, sw)
            dkmat = np.einsum("nol,nkl->ok", gmat, cols)
            kmat = np.concatenate([k.data.reshape(k.shape[0], -1) for k in kernels])
            dcols = np.matmul(kmat.T, gmat)
            dx = _col2im(dcols, x4.shape, k1, k2, ph, pw, sh, sw, oh, ow)
            grads = [dx[0] if squeeze else dx]
            for dk, k in zip(np.split(dkmat, splits, axis=0), kernels):
                grads.append(dk.reshape(k.shape))
            for g, b in zip(g4s, biases):
                if b is not None:
                    grads.append(g.sum(axis=(0, 2, 3)))
            return tuple(grads)
        return bwd

    inputs = (x, *kernels, *[b for b in biases if b is not None])
    return _emit("conv2d", inputs, forward, backward_builder)


def conv2d(x, kernels, bias=None, padding=0, stride=1) -> Tensor:
    """Zero-padded cross-correlation of (C_in,H,W) with (C_out,C_in,k1,k2) kernels."""
    return conv2d_multi(x, (kernels,), (bias,), padding=padding, stride=stride)[0]


def pool2d(x, mode: str, window, stride=None) -> Tensor:
    """Per-channel window reduction (max or avg) over the spatial dims."""
    if mode not in ("max", "avg"):
        raise ValueError(f"pool2d: mode must be 'max' or 'avg', got {mode!r}")
    x = as_tensor(x)
    wh, ww = _pair(window, "window")
    sh, sw = _pair(stride if stride is not None else window, "stride")
    x4, squeeze = _as_batched(x.data)
    n, c, h, w = x4.shape
    if wh > h or ww > w:
        raise ShapeError(f"pool2d: window {(wh, ww)} larger than input {(h, w)}")
    oh, ow = _out_dim(h, wh, 0, sh), _out_dim(w, ww, 0, sw)

    def windows():
        win = sliding_window_view(x4, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw]
        return win.reshape(n, c, oh, ow, wh * ww)

    def forward():
        win = windows()
        y = win.max(axis=-1) if mode == "max" else win.mean(axis=-1)
        return (y[0] if squeeze else y,)

    def backward_builder(outs):
        def bwd(gs):
            g = gs[0][None] if squeeze else gs[0]
            dx = np.zeros_like(x4)
            if mode == "avg":
                dwin = np.broadcast_to(
                    (g / (wh * ww))[..., None, None], (n, c, oh, ow, wh, ww))
                dcols = dwin.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * wh * ww, oh * ow)
                dx = _col2im(dcols, x4.shape, wh, ww, 0, 0, sh, sw, oh, ow)
            else:
                idx = windows().argmax(axis=-1)
                ni, ci, oi, oj = np.indices((n, c, oh, ow))
                hi = oi * sh + idx // ww
                wi = oj * sw + idx % ww
                np.add.at(dx, (ni, ci, hi, wi), g)
            return (dx[0] if squeeze else dx,)
        return bwd

    return _emit(f"pool2d_{mode}", (x,), forward, backward_builder)[0]


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial dims: (C,H,W) -> (C,), or (N,C,H,W) -> (N,C)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected 3-D or 4-D input, got {x.shape}")
    area = x.shape[-1] * x.shape[-2]

    def backward_builder(outs):
        def bwd(gs):
            g = gs[0]
            return (np.broadcast_to((g / area)[..., None, None], x.shape).copy(),)
        return bwd

    return _emit("global_avg_pool", (x,),
                 lambda: (x.data.mean(axis=(-2, -1)),),
                 backward_builder)[0]
