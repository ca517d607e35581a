"""Gated recurrent units: fully-connected, convolutional, stacked, bidirectional.

All three cell variants share the same gating algebra.  With update gate z,
reset gate r and candidate state h~:

    z   = sigmoid(W_z x + U_z h_prev + b_z)
    r   = sigmoid(W_r x + U_r h_prev + b_r)
    h~  = tanh(W x + U (r * h_prev) + b)
    h   = (1 - z) * h_prev + z * h~

The fully-connected cell realizes the products as matrix-vector ops; the
convolutional cell replaces every product with a same-padded stride-1 2D
convolution, so hidden maps keep the spatial size of their inputs.  The
stacked variant additionally feeds the lower layer's current hidden state
into the z and r gates (only the gates: the candidate takes no bottom-up
input).  Bias vectors are included on the input-to-hidden path; zero biases
recover the bias-free update equations exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, add, concat_channels, hadamard,
                     one_minus, parameter, sigmoid, tanh, zeros)
from .convops import conv2d, conv2d_multi, pool2d


def glorot_uniform(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Zero-mean uniform draw with variance 2/(fan_in+fan_out)."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@dataclass
class GRUParams:
    """Fully-connected GRU weights: six matrices plus three bias vectors."""

    W: Tensor
    W_z: Tensor
    W_r: Tensor
    U: Tensor
    U_z: Tensor
    U_r: Tensor
    b: Tensor
    b_z: Tensor
    b_r: Tensor

    def __post_init__(self):
        o_h, o_x = self.W.shape
        if o_h <= 0 or o_x <= 0:
            raise ShapeError("GRUParams: dimensions must be positive")
        for name in ("W", "W_z", "W_r"):
            if getattr(self, name).shape != (o_h, o_x):
                raise ShapeError(f"GRUParams: {name} must be ({o_h},{o_x})")
        for name in ("U", "U_z", "U_r"):
            if getattr(self, name).shape != (o_h, o_h):
                raise ShapeError(f"GRUParams: {name} must be ({o_h},{o_h})")
        for name in ("b", "b_z", "b_r"):
            if getattr(self, name).shape != (o_h,):
                raise ShapeError(f"GRUParams: {name} must be ({o_h},)")

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def named_tensors(self):
        for name in ("W", "W_z", "W_r", "U", "U_z", "U_r", "b", "b_z", "b_r"):
            yield name, getattr(self, name)


def init_gru_params(rng, input_size: int, hidden_size: int) -> GRUParams:
    def w():
        return parameter(glorot_uniform(rng, (hidden_size, input_size),
                                        input_size, hidden_size))

    def u():
        return parameter(orthogonal(rng, hidden_size))

    def b():
        return parameter(np.zeros(hidden_size))

    return GRUParams(W=w(), W_z=w(), W_r=w(), U=u(), U_z=u(), U_r=u(),
                     b=b(), b_z=b(), b_r=b())


@dataclass
class ConvGRULayerParams:
    """Convolutional GRU weights: six kernel stacks plus three bias vectors.

    Kernels are (O_h, O_x, k1, k2) for the input-to-hidden path and
    (O_h, O_h, k1, k2) for hidden-to-hidden.  Spatial sizes must be odd so
    the fixed padding (k1//2, k2//2) preserves map dimensions exactly.
    """

    W: Tensor
    W_z: Tensor
    W_r: Tensor
    U: Tensor
    U_z: Tensor
    U_r: Tensor
    b: Tensor
    b_z: Tensor
    b_r: Tensor

    def __post_init__(self):
        o_h, o_x, k1, k2 = self.W.shape
        if k1 % 2 == 0 or k2 % 2 == 0:
            raise ShapeError(f"ConvGRULayerParams: kernel size {(k1, k2)} must be odd")
        for name in ("W", "W_z", "W_r"):
            if getattr(self, name).shape != (o_h, o_x, k1, k2):
                raise ShapeError(f"ConvGRULayerParams: bad {name} shape")
        for name in ("U", "U_z", "U_r"):
            if getattr(self, name).shape != (o_h, o_h, k1, k2):
                raise ShapeError(f"ConvGRULayerParams: bad {name} shape")
        for name in ("b", "b_z", "b_r"):
            if getattr(self, name).shape != (o_h,):
                raise ShapeError(f"ConvGRULayerParams: bad {name} shape")

    @property
    def hidden_channels(self) -> int:
        return self.W.shape[0]

    @property
    def input_channels(self) -> int:
        return self.W.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.W.shape[2], self.W.shape[3]

    @property
    def padding(self) -> tuple[int, int]:
        k1, k2 = self.kernel_size
        return k1 // 2, k2 // 2

    def named_tensors(self):
        for name in ("W", "W_z", "W_r", "U", "U_z", "U_r", "b", "b_z", "b_r"):
            yield name, getattr(self, name)


def init_convgru_params(rng, input_channels: int, hidden_channels: int,
                        kernel_size: int = 3) -> ConvGRULayerParams:
    k = kernel_size
    fan_in, fan_out = input_channels * k * k, hidden_channels * k * k

    def w():
        return parameter(glorot_uniform(
            rng, (hidden_channels, input_channels, k, k), fan_in, fan_out))

    def u():
        if k == 1:
            return parameter(orthogonal(rng, hidden_channels)
                             .reshape(hidden_channels, hidden_channels, 1, 1))
        return parameter(glorot_uniform(
            rng, (hidden_channels, hidden_channels, k, k), fan_out, fan_out))

    def b():
        return parameter(np.zeros(hidden_channels))

    return ConvGRULayerParams(W=w(), W_z=w(), W_r=w(), U=u(), U_z=u(), U_r=u(),
                              b=b(), b_z=b(), b_r=b())


@dataclass
class StackedExtraParams:
    """Bottom-up gate kernels: lower hidden state into the z and r gates."""

    W_zl: Tensor
    W_rl: Tensor

    def __post_init__(self):
        if self.W_zl.shape != self.W_rl.shape or self.W_zl.ndim != 4:
            raise ShapeError("StackedExtraParams: W_zl and W_rl must be equal 4-D kernels")

    def named_tensors(self):
        yield "W_zl", self.W_zl
        yield "W_rl", self.W_rl


def init_stacked_extras(rng, below_channels: int, hidden_channels: int,
                        kernel_size: int = 3) -> StackedExtraParams:
    k = kernel_size
    fan_in, fan_out = below_channels * k * k, hidden_channels * k * k

    def w():
        return parameter(glorot_uniform(
            rng, (hidden_channels, below_channels, k, k), fan_in, fan_out))

    return StackedExtraParams(W_zl=w(), W_rl=w())


def gru_step(params: GRUParams, x_t, h_prev) -> Tensor:
    """One fully-connected GRU update; accepts (D,) vectors or (N, D) batches."""
    from .tensor import affine

    gx_z = affine(x_t, params.W_z, params.b_z)
    gx_r = affine(x_t, params.W_r, params.b_r)
    gx_c = affine(x_t, params.W, params.b)
    z = sigmoid(add(gx_z, affine(h_prev, params.U_z)))
    r = sigmoid(add(gx_r, affine(h_prev, params.U_r)))
    h_cand = tanh(add(gx_c, affine(hadamard(r, h_prev), params.U)))
    return add(hadamard(one_minus(z), h_prev), hadamard(z, h_cand))


def _check_spatial(x_t: Tensor, h_prev: Tensor, op: str) -> None:
    if x_t.shape[-2:] != h_prev.shape[-2:]:
        raise ShapeError(f"{op}: input {x_t.shape} and hidden {h_prev.shape} "
                         "spatial dims differ")


def convgru_step(params: ConvGRULayerParams, x_t, h_prev) -> Tensor:
    """One convolutional GRU update; hidden maps keep the input spatial size."""
    _check_spatial(x_t, h_prev, "convgru_step")
    pad = params.padding
    gx_z, gx_r, gx_c = conv2d_multi(
        x_t, (params.W_z, params.W_r, params.W),
        (params.b_z, params.b_r, params.b), padding=pad)
    gh_z, gh_r = conv2d_multi(
        h_prev, (params.U_z, params.U_r), (None, None), padding=pad)
    z = sigmoid(add(gx_z, gh_z))
    r = sigmoid(add(gx_r, gh_r))
    gh_c = conv2d(hadamard(r, h_prev), params.U, padding=pad)
    h_cand = tanh(add(gx_c, gh_c))
    return add(hadamard(one_minus(z), h_prev), hadamard(z, h_cand))


def stacked_convgru_step(params: ConvGRULayerParams, extra: StackedExtraParams,
                         x_t, h_below_t, h_prev) -> Tensor:
    """Convolutional GRU update with the lower hidden state feeding both gates.

    The candidate state deliberately receives no bottom-up term; zero extra
    kernels (or a zero lower state) reduce this exactly to ``convgru_step``.
    """
    _check_spatial(x_t, h_prev, "stacked_convgru_step")
    _check_spatial(x_t, h_below_t, "stacked_convgru_step")
    pad = params.padding
    gx_z, gx_r, gx_c = conv2d_multi(
        x_t, (params.W_z, params.W_r, params.W),
        (params.b_z, params.b_r, params.b), padding=pad)
    gb_z, gb_r = conv2d_multi(
        h_below_t, (extra.W_zl, extra.W_rl), (None, None), padding=pad)
    gh_z, gh_r = conv2d_multi(
        h_prev, (params.U_z, params.U_r), (None, None), padding=pad)
    z = sigmoid(add(add(gx_z, gb_z), gh_z))
    r = sigmoid(add(add(gx_r, gb_r), gh_r))
    gh_c = conv2d(hadamard(r, h_prev), params.U, padding=pad)
    h_cand = tanh(add(gx_c, gh_c))
    return add(hadamard(one_minus(z), h_prev), hadamard(z, h_cand))


def initial_hidden(params: ConvGRULayerParams, like: Tensor) -> Tensor:
    """Zero initial state matching the spatial dims of an input map."""
    shape = like.shape[:-3] + (params.hidden_channels,) + like.shape[-2:]
    return zeros(shape)


def run_layer(params: ConvGRULayerParams, inputs, h0=None):
    """Iterate convgru_step over a sequence; returns (all_hiddens, final)."""
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("run_layer: empty input sequence")
    h = h0 if h0 is not None else initial_hidden(params, inputs[0])
    hiddens = []
    for x_t in inputs:
        h = convgru_step(params, x_t, h)
        hiddens.append(h)
    return hiddens, hiddens[-1]


def _pool_to(h_below: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Max-pool a lower hidden state down to an upper layer's resolution."""
    hb, wb = h_below.shape[-2:]
    ht, wt = target_hw
    if hb == ht and wb == wt:
        return h_below
    if hb % ht or wb % wt:
        raise ShapeError(f"run_stack: cannot pool {(hb, wb)} to {(ht, wt)} "
                         "by an integer factor")
    return pool2d(h_below, "max", (hb // ht, wb // wt))


def run_stack(layers, percepts):
    """Run a bottom-up stack of convolutional GRUs over a percept sequence.

    ``layers`` is a list of (ConvGRULayerParams, StackedExtraParams-or-None);
    ``percepts`` is indexed [t][l].  At every time step, layers are processed
    bottom-up and each layer above the first sees the current lower hidden
    state, max-pooled to its own resolution, through its gate kernels.
    Returns the per-layer final hidden states.
    """
    percepts = list(percepts)
    if not percepts:
        raise ShapeError("run_stack: empty percept sequence")
    n_layers = len(layers)
    if any(len(step) != n_layers for step in percepts):
        raise ShapeError("run_stack: percept levels do not match layer count")
    h = [initial_hidden(p, percepts[0][l]) for l, (p, _) in enumerate(layers)]
    for step in percepts:
        below = None
        for l, (params, extra) in enumerate(layers):
            x_t = step[l]
            if l == 0 or extra is None:
                h[l] = convgru_step(params, x_t, h[l])
            else:
                h_below = _pool_to(below, x_t.shape[-2:])
                h[l] = stacked_convgru_step(params, extra, x_t, h_below, h[l])
            below = h[l]
    return h


def bidirectional_encode(params_fwd: ConvGRULayerParams,
                         params_bwd: ConvGRULayerParams, inputs) -> Tensor:
    """Encode a sequence forward and reversed; concatenate the final states.

    Output channel order is forward half first, backward half second.
    """
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("bidirectional_encode: empty input sequence")
    _, final_fwd = run_layer(params_fwd, inputs)
    _, final_bwd = run_layer(params_bwd, list(reversed(inputs)))
    return concat_channels(final_fwd, final_bwd)


def param_count(k1: int, k2: int, o_x: int, o_h: int,
                include_bias: bool = False, below_channels: int | None = None) -> int:
    """Exact element count of one convolutional GRU layer's parameters.

    Six kernels contribute 3*k1*k2*(o_x*o_h + o_h*o_h); biases add 3*o_h and
    bottom-up gate kernels add 2*k1*k2*below_channels*o_h.
    """
    if min(k1, k2, o_x, o_h) <= 0:
        raise ShapeError("param_count: dimensions must be positive")
    n = 3 * k1 * k2 * (o_x * o_h + o_h * o_h)
    if below_channels is not None:
        n += 2 * k1 * k2 * below_channels * o_h
    if include_bias:
        n += 3 * o_h
    return n
