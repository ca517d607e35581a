"""Per-frame convolutional feature extractor emitting a multi-resolution ladder.

Each stage is conv(3x3, same) -> max(0, .) -> maxpool, so the L emitted
percept levels have strictly decreasing spatial resolution.  Frames are
processed independently: the backbone never mixes time steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, as_tensor, parameter, relu, split_sequence
from .convops import conv2d, pool2d


@dataclass(frozen=True)
class BackboneConfig:
    """Geometry of the percept extractor.

    ``input_shape`` is one frame (C, H, W); ``channels`` and ``pool_factors``
    describe the stages, one emitted percept level per stage.
    """

    input_shape: tuple = (1, 32, 32)
    channels: tuple = (16, 32, 64)
    pool_factors: tuple = (2, 2, 2)
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.channels) != len(self.pool_factors) or not self.channels:
            raise ShapeError("BackboneConfig: channels and pool_factors must align")
        if self.kernel_size % 2 == 0:
            raise ShapeError("BackboneConfig: kernel size must be odd")
        if any(f < 2 for f in self.pool_factors):
            raise ShapeError("BackboneConfig: pool factors must be >= 2 so "
                             "resolutions strictly decrease")
        h, w = self.input_shape[1], self.input_shape[2]
        for f in self.pool_factors:
            if h % f or w % f:
                raise ShapeError(f"BackboneConfig: {h}x{w} not divisible by pool {f}")
            h, w = h // f, w // f

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    def level_shapes(self) -> list[tuple[int, int, int]]:
        """Per-level (channels, height, width) of the emitted percepts."""
        shapes = []
        h, w = self.input_shape[1], self.input_shape[2]
        for c, f in zip(self.channels, self.pool_factors):
            h, w = h // f, w // f
            shapes.append((c, h, w))
        return shapes


@dataclass
class BackboneParams:
    """One (kernel, bias) pair per stage."""

    kernels: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def named_tensors(self):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"stage{i}.kernel", k
            yield f"stage{i}.bias", b

    def set_trainable(self, trainable: bool) -> None:
        """Freeze or unfreeze the extractor (emulates a fixed-percept regime)."""
        for _, t in self.named_tensors():
            t.requires_grad = trainable
            t._tracked = trainable


def init_backbone(rng, config: BackboneConfig) -> BackboneParams:
    params = BackboneParams()
    c_in = config.input_shape[0]
    k = config.kernel_size
    for c_out in config.channels:
        # He-uniform: the stages are rectified
        limit = np.sqrt(6.0 / (c_in * k * k))
        params.kernels.append(parameter(rng.uniform(-limit, limit, (c_out, c_in, k, k))))
        params.biases.append(parameter(np.zeros(c_out)))
        c_in = c_out
    return params


def extract_percepts(config: BackboneConfig, params: BackboneParams, frames):
    """Apply the backbone to every frame of a clip (or batch of clips).

    ``frames`` is (T, C, H, W) or (N, T, C, H, W).  Returns the percept stack
    indexed [t][level]: maps shaped (C_l, H_l, W_l), with a leading batch axis
    in the batched case.
    """
    frames = as_tensor(frames)
    if frames.ndim == 4:
        n_clips = None
        t_steps = frames.shape[0]
        flat = frames
        frame_shape = frames.shape[1:]
    elif frames.ndim == 5:
        n_clips, t_steps = frames.shape[0], frames.shape[1]
        flat = Tensor(frames.data.reshape((-1,) + frames.shape[2:]), _check=False)
        flat._tracked = frames._tracked
        frame_shape = frames.shape[2:]
    else:
        raise ShapeError(f"extract_percepts: expected (T,C,H,W) or (N,T,C,H,W), "
                         f"got {frames.shape}")
    if frame_shape != tuple(config.input_shape):
        raise ShapeError(f"extract_percepts: frame shape {frame_shape} does not "
                         f"match backbone input {config.input_shape}")

    pad = config.kernel_size // 2
    levels = []
    x = flat
    for kern, bias, factor in zip(params.kernels, params.biases, config.pool_factors):
        x = pool2d(relu(conv2d(x, kern, bias, padding=pad)), "max", factor)
        levels.append(split_sequence(x, t_steps, batch=n_clips))
    # levels is [level][t]; transpose to [t][level]
    return [[levels[l][t] for l in range(len(levels))] for t in range(t_steps)]
