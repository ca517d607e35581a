"""Model assembly: backbone + recurrent layers + per-level classifiers.

Four architectures share one forward contract (clip in, class probabilities
out):

* ``gru_rcn``        - one convolutional GRU per percept level, independent.
* ``stacked_gru_rcn``- same, plus bottom-up gate connections between levels.
* ``bidir_gru_rcn``  - forward and reversed convolutional GRUs per level,
                       final states concatenated along channels.
* ``fc_gru_baseline``- fully-connected GRU over the top percept level only,
                       spatially collapsed to a vector per frame.

Each level's final hidden state is average-pooled to a feature vector,
dropped out during training (inverted dropout), classified by its own
linear+softmax head, and the per-level probability vectors are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, ShapeError, add, affine, as_tensor, hadamard,
                     parameter, scale, softmax, zeros)
from .convops import global_avg_pool
from .backbone import BackboneConfig, BackboneParams, extract_percepts, init_backbone
from .cells import (ConvGRULayerParams, GRUParams, StackedExtraParams,
                    bidirectional_encode, glorot_uniform, init_convgru_params,
                    init_gru_params, init_stacked_extras, run_layer, run_stack)

ARCHITECTURES = ("gru_rcn", "stacked_gru_rcn", "bidir_gru_rcn", "fc_gru_baseline")
STREAMS = ("rgb", "framediff")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "gru_rcn"
    hidden_widths: tuple = (16, 24, 32)
    kernel_size: int = 3
    dropout_rate: float = 0.7
    class_count: int = 8
    stream: str = "rgb"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ShapeError(f"unknown architecture {self.architecture!r}")
        if self.stream not in STREAMS:
            raise ShapeError(f"unknown stream {self.stream!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ShapeError("dropout rate must be in [0, 1)")
        if self.class_count < 2:
            raise ShapeError("need at least two classes")
        if not self.hidden_widths:
            raise ShapeError("hidden_widths must be non-empty")


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    def named_tensors(self):
        yield "weight", self.weight
        yield "bias", self.bias


def _init_head(rng, classes: int, features: int) -> ClassifierHead:
    return ClassifierHead(
        weight=parameter(glorot_uniform(rng, (classes, features), features, classes)),
        bias=parameter(np.zeros(classes)))


@dataclass
class Model:
    config: ModelConfig
    backbone_config: BackboneConfig
    backbone: BackboneParams
    cells: list = field(default_factory=list)
    cells_bwd: list = field(default_factory=list)
    extras: list = field(default_factory=list)
    fc_cell: GRUParams | None = None
    heads: list = field(default_factory=list)

    def named_parameters(self):
        """Checkpoint order: per-layer GRU tensors (W, W_z, W_r, U, U_z, U_r,
        b, b_z, b_r; forward then backward direction for bidirectional),
        then stacked extras, then head parameters, then backbone stages."""
        out = []
        for l, cell in enumerate(self.cells):
            for name, t in cell.named_tensors():
                out.append((f"layer{l}.fwd.{name}" if self.cells_bwd
                            else f"layer{l}.{name}", t))
            if self.cells_bwd:
                for name, t in self.cells_bwd[l].named_tensors():
                    out.append((f"layer{l}.bwd.{name}", t))
        if self.fc_cell is not None:
            for name, t in self.fc_cell.named_tensors():
                out.append((f"layer0.{name}", t))
        for l, extra in enumerate(self.extras):
            if extra is not None:
                for name, t in extra.named_tensors():
                    out.append((f"layer{l}.{name}", t))
        for i, head in enumerate(self.heads):
            for name, t in head.named_tensors():
                out.append((f"head{i}.{name}", t))
        for name, t in self.backbone.named_tensors():
            out.append((f"backbone.{name}", t))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self):
        return [t for t in self.parameters() if t.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict) -> None:
        for name, t in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


def build_model(config: ModelConfig, backbone_config: BackboneConfig, rng,
                freeze_backbone: bool = False) -> Model:
    """Instantiate parameters for one architecture on one percept geometry."""
    levels = backbone_config.level_shapes()
    arch = config.architecture
    if arch == "fc_gru_baseline":
        if len(config.hidden_widths) != 1:
            raise ShapeError("fc_gru_baseline uses a single hidden width")
    elif len(config.hidden_widths) != len(levels):
        raise ShapeError(f"hidden_widths has {len(config.hidden_widths)} entries "
                         f"for {len(levels)} percept levels")

    model = Model(config=config, backbone_config=backbone_config,
                  backbone=init_backbone(rng, backbone_config))
    if freeze_backbone:
        model.backbone.set_trainable(False)

    if arch == "fc_gru_baseline":
        top_channels = levels[-1][0]
        width = config.hidden_widths[0]
        model.fc_cell = init_gru_params(rng, top_channels, width)
        model.heads = [_init_head(rng, config.class_count, width)]
        return model

    k = config.kernel_size
    for (c_in, _, _), width in zip(levels, config.hidden_widths):
        model.cells.append(init_convgru_params(rng, c_in, width, k))
    if arch == "bidir_gru_rcn":
        for (c_in, _, _), width in zip(levels, config.hidden_widths):
            model.cells_bwd.append(init_convgru_params(rng, c_in, width, k))
    if arch == "stacked_gru_rcn":
        model.extras = [None]
        for l in range(1, len(levels)):
            model.extras.append(init_stacked_extras(
                rng, config.hidden_widths[l - 1], config.hidden_widths[l], k))
    head_widths = [2 * w if arch == "bidir_gru_rcn" else w
                   for w in config.hidden_widths]
    model.heads = [_init_head(rng, config.class_count, w) for w in head_widths]
    return model


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout: zero features with probability ``rate``, scale
    survivors by 1/(1-rate) so inference needs no correction."""
    if rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return hadamard(x, Tensor(mask, _check=False))


def _clip_frames(clip) -> Tensor:
    frames = clip.frames if hasattr(clip, "frames") else clip
    return as_tensor(frames)


def _head_probs(model: Model, features: list, training: bool, rng) -> Tensor:
    if training and model.config.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        features = [dropout(f, model.config.dropout_rate, rng) for f in features]
    probs = [softmax(affine(f, head.weight, head.bias))
             for f, head in zip(features, model.heads)]
    total = probs[0]
    for p in probs[1:]:
        total = add(total, p)
    return scale(total, 1.0 / len(probs))


def forward(model: Model, clip, training: bool = False, rng=None) -> Tensor:
    """Class probabilities for one clip (T,C,H,W) or a batch (N,T,C,H,W)."""
    if model.config.architecture == "fc_gru_baseline":
        return forward_fc_baseline(model, clip, training=training, rng=rng)
    frames = _clip_frames(clip)
    percepts = extract_percepts(model.backbone_config, model.backbone, frames)
    arch = model.config.architecture
    n_levels = len(model.cells)
    if arch == "stacked_gru_rcn":
        finals = run_stack(list(zip(model.cells, model.extras)), percepts)
    elif arch == "bidir_gru_rcn":
        finals = [bidirectional_encode(model.cells[l], model.cells_bwd[l],
                                       [step[l] for step in percepts])
                  for l in range(n_levels)]
    else:
        finals = [run_layer(model.cells[l], [step[l] for step in percepts])[1]
                  for l in range(n_levels)]
    features = [global_avg_pool(f) for f in finals]
    return _head_probs(model, features, training, rng)


def forward_fc_baseline(model: Model, clip, training: bool = False, rng=None) -> Tensor:
    """Fully-connected GRU over the top percept level only.

    The top map is collapsed to a per-frame feature vector by global average
    pooling (the identity when that level is already 1x1 spatial), so the
    recurrence sees no spatial layout below the top of the hierarchy.
    """
    if model.fc_cell is None:
        raise ShapeError("model was not built as fc_gru_baseline")
    frames = _clip_frames(clip)
    percepts = extract_percepts(model.backbone_config, model.backbone, frames)
    vectors = [global_avg_pool(step[-1]) for step in percepts]
    batched = vectors[0].ndim == 2
    width = model.fc_cell.hidden_size
    h = zeros((vectors[0].shape[0], width) if batched else (width,))
    from .cells import gru_step
    for v in vectors:
        h = gru_step(model.fc_cell, v, h)
    return _head_probs(model, [h], training, rng)


def fuse_streams(scores_a, scores_b, weight_a: float, weight_b: float) -> Tensor:
    """Weighted average of two prediction-score vectors (or batches)."""
    a, b = as_tensor(scores_a), as_tensor(scores_b)
    if a.shape != b.shape:
        raise ShapeError(f"fuse_streams: score shapes {a.shape} != {b.shape}")
    if weight_a < 0 or weight_b < 0 or weight_a + weight_b == 0:
        raise ValueError("fuse_streams: weights must be >= 0 and not both zero")
    total = weight_a + weight_b
    return add(scale(a, weight_a / total), scale(b, weight_b / total))
