"""Convolutional GRU recurrence over multi-resolution percepts, from scratch.

The package is organized around seven pieces:

* :mod:`grurcn.tensor`   - float64 tensors, tape-based reverse-mode autodiff
* :mod:`grurcn.convops`  - 2D convolution, pooling, global average pooling
* :mod:`grurcn.cells`    - fully-connected / convolutional / stacked GRU cells
* :mod:`grurcn.backbone` - per-frame multi-resolution percept extractor
* :mod:`grurcn.model`    - the four architectures and stream fusion
* :mod:`grurcn.training` - loss, Adam, early stopping, gradient checking
* :mod:`grurcn.data`     - synthetic moving-sprite videos, crops, evaluation

plus experiment plumbing (:mod:`grurcn.config`, :mod:`grurcn.experiment`,
:mod:`grurcn.cli`) and binary formats (:mod:`grurcn.storage`).
"""

from .tensor import (Tensor, Tape, ShapeError, NumericalError, add, affine,
                     as_tensor, backward, concat_channels, elementwise,
                     hadamard, inject_backward_fault, one_minus, parameter,
                     relu, scale, sigmoid, softmax, sum_all, tanh, zeros)
from .convops import conv2d, conv2d_multi, global_avg_pool, pool2d
from .storage import (load_checkpoint, load_dataset, read_tensor,
                      save_checkpoint, save_dataset, write_tensor)
from .cells import (ConvGRULayerParams, GRUParams, StackedExtraParams,
                    bidirectional_encode, convgru_step, gru_step,
                    init_convgru_params, init_gru_params, init_stacked_extras,
                    param_count, run_layer, run_stack, stacked_convgru_step)
from .backbone import BackboneConfig, BackboneParams, extract_percepts, init_backbone
from .model import (ARCHITECTURES, ClassifierHead, Model, ModelConfig,
                    build_model, dropout, forward, forward_fc_baseline,
                    fuse_streams)
from .training import (AdamState, GradCheckReport, TrainConfig, TrainLog,
                       adam_step, grad_check, nll_loss, standard_grad_checks,
                       train, validate)
from .data import (EvalProtocol, EvalResult, SplitData, SynthSpec, VideoClip,
                   accuracy_from_scores, bilinear_resize, evaluate,
                   framediff_stream, generate_dataset, sample_crop,
                   score_clips, trajectory_oracle)
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (describe_model, evaluate_checkpoint, run_experiment,
                         conv_mult_estimate, fc_mult_estimate)

__version__ = "0.1.0"
