"""Loss, Adam optimization, early stopping, and the gradient-checking oracle."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, NumericalError, ShapeError, Tape, _emit, as_tensor,
                     backward, inject_backward_fault)
from .data import EvalProtocol, sample_crop
from .model import forward


def nll_loss(probabilities, labels) -> Tensor:
    """Mean negative log-probability of the true classes.

    ``probabilities`` is (batch, classes) with rows summing to one;
    probabilities are clamped below at 1e-12 before the log.
    """
    probs = as_tensor(probabilities)
    if probs.ndim not in (1, 2):
        raise ShapeError(f"nll_loss: expected (batch, classes), got {probs.shape}")
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    single = probs.ndim == 1
    n, classes = (1, probs.shape[0]) if single else probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"nll_loss: {n} rows but labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"nll_loss: label out of range [0, {classes})")
    rows = np.arange(n)

    def rows_view():
        return probs.data.reshape(n, classes)

    def forward_fn():
        picked = np.maximum(rows_view()[rows, labels], 1e-12)
        return (np.asarray(-np.log(picked).mean()),)

    def backward_builder(outs):
        def bwd(gs):
            picked = rows_view()[rows, labels]
            g = np.zeros((n, classes))
            live = picked > 1e-12
            g[rows[live], labels[live]] = -float(gs[0]) / (n * picked[live])
            return (g.reshape(probs.shape),)
        return bwd

    return _emit("nll_loss", (probs,), forward_fn, backward_builder)[0]


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, applied to the parameters in place.

    ``grads`` may be a dict keyed by parameter tensor or a list aligned with
    ``params``.  Returns (params, state).
    """
    if isinstance(grads, dict):
        grads = [grads[p] for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("adam_step: params, grads and state must align")
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("adam_step: non-finite gradient")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.alpha * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    per_block: dict
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(loss_fn, named_params, tolerance: float = 1e-5, h: float = 1e-5,
               max_coords: int = 40, rng=None, fault_op: str | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar loss against central differences.

    ``loss_fn`` must be a deterministic closure over the given parameters.
    Blocks larger than ``max_coords`` are spot-checked at sampled coordinates.
    ``fault_op`` corrupts one op's backward rule (negative control: the
    report must then fail).
    """
    rng = rng or np.random.default_rng(0)
    named_params = list(named_params)
    params = [p for _, p in named_params]
    with Tape() as tape:
        loss = loss_fn()
    if fault_op is None:
        analytic = backward(tape, loss, params=params)
    else:
        with inject_backward_fault(fault_op):
            analytic = backward(tape, loss, params=params)

    per_block = {}
    worst = 0.0
    for name, p in named_params:
        flat = p.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[p].reshape(-1)
        block_err = 0.0
        for i in coords:
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn().item()
            flat[i] = saved - h
            down = loss_fn().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * h)
            block_err = max(block_err, relative_error(a_flat[i], numeric))
        per_block[name] = block_err
        worst = max(worst, block_err)
    return GradCheckReport(per_block=per_block, max_rel_err=worst, tolerance=tolerance)


def standard_grad_checks(seed: int = 0, tolerance: float = 1e-5,
                         fault_op: str | None = None) -> dict[str, GradCheckReport]:
    """A battery of finite-difference checks on small random configurations.

    Covers the recurrent steps, a short unrolled sequence, and a complete
    model forward plus loss.  ``fault_op`` corrupts one backward rule so a
    caller can verify the checker actually detects broken gradients.
    """
    from .backbone import BackboneConfig
    from .cells import (gru_step, convgru_step, stacked_convgru_step, run_layer,
                        init_gru_params, init_convgru_params, init_stacked_extras)
    from .model import ModelConfig, build_model
    from .tensor import Tensor, sum_all, hadamard

    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}

    def weighted(out):
        return sum_all(hadamard(out, Tensor(rng.standard_normal(out.shape))))

    p = init_gru_params(rng, 3, 4)
    x = Tensor(rng.standard_normal(3))
    h0 = Tensor(rng.standard_normal(4))
    named = list(p.named_tensors())
    reports["gru_step"] = grad_check(
        lambda: weighted(gru_step(p, x, h0)), named, tolerance, rng=rng,
        fault_op=fault_op)

    cp = init_convgru_params(rng, 2, 3, 3)
    xm = Tensor(rng.standard_normal((2, 4, 5)))
    hm = Tensor(rng.standard_normal((3, 4, 5)))
    reports["convgru_step"] = grad_check(
        lambda: weighted(convgru_step(cp, xm, hm)), list(cp.named_tensors()),
        tolerance, rng=rng, fault_op=fault_op)

    ex = init_stacked_extras(rng, 2, 3, 3)
    hb = Tensor(rng.standard_normal((2, 4, 5)))
    reports["stacked_convgru_step"] = grad_check(
        lambda: weighted(stacked_convgru_step(cp, ex, xm, hb, hm)),
        list(cp.named_tensors()) + list(ex.named_tensors()),
        tolerance, rng=rng, fault_op=fault_op)

    seq = [Tensor(rng.standard_normal((2, 4, 4))) for _ in range(3)]
    reports["run_layer_T3"] = grad_check(
        lambda: weighted(run_layer(cp, seq)[1]), list(cp.named_tensors()),
        tolerance, rng=rng, fault_op=fault_op)

    backbone = BackboneConfig(input_shape=(1, 8, 8), channels=(2, 3),
                              pool_factors=(2, 2))
    model = build_model(ModelConfig(architecture="gru_rcn", hidden_widths=(2, 3),
                                    class_count=2, dropout_rate=0.0),
                        backbone, rng)
    frames = rng.random((3, 1, 8, 8))

    def model_loss():
        return nll_loss(forward(model, frames), 1)

    reports["full_model"] = grad_check(model_loss, model.named_parameters(),
                                       tolerance, rng=rng, fault_op=fault_op)
    return reports


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    t_crop: int = 10
    crop_ladder: tuple = (32, 28, 24, 21)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_acc": self.val_acc,
                "seconds": self.seconds}


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n"
                       for r in self.records)


def _center_views(clips, t_crop: int, in_h: int, in_w: int) -> np.ndarray:
    """Deterministic single center sub-volume per clip (validation input)."""
    views = []
    for clip in clips:
        t, _, h, w = clip.frames.shape
        t0 = (t - t_crop) // 2
        oy, ox = (h - in_h) // 2, (w - in_w) // 2
        views.append(clip.frames[t0:t0 + t_crop, :, oy:oy + in_h, ox:ox + in_w])
    return np.stack(views)


def validate(model, clips, t_crop: int, chunk: int = 64) -> tuple[float, float]:
    """Center-view validation loss and accuracy (no tape, no augmentation)."""
    _, in_h, in_w = model.backbone_config.input_shape
    labels = np.array([c.label for c in clips])
    losses, correct = [], 0
    for lo in range(0, len(clips), chunk):
        batch = clips[lo:lo + chunk]
        views = _center_views(batch, t_crop, in_h, in_w)
        probs = forward(model, views)
        losses.append(nll_loss(probs, labels[lo:lo + len(batch)]).item() * len(batch))
        correct += int((np.argmax(probs.data, axis=1) == labels[lo:lo + len(batch)]).sum())
    return sum(losses) / len(clips), correct / len(clips)


def train(model, splits: dict, config: TrainConfig, seed: int):
    """Mini-batch Adam with random-crop augmentation and early stopping.

    ``splits`` needs "train" and "val" clip lists.  Keeps the parameters with
    the best validation loss; stops once ``patience`` epochs pass without
    improvement (patience 0 trains exactly one epoch).  Returns
    (best_state, TrainLog); the model is left holding the best state.
    """
    train_clips = splits["train"]
    val_clips = splits["val"]
    if not train_clips or not val_clips:
        raise ValueError("train: need non-empty train and validation splits")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    params = model.trainable_parameters()
    state = AdamState.for_params(params, alpha=config.alpha, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    out_size = model.backbone_config.input_shape[1]
    log = TrainLog()
    best_state = model.state_dict()
    wait = 0
    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        order = rng.permutation(len(train_clips))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            crops = [sample_crop(train_clips[i], rng, ladder=config.crop_ladder,
                                 t_crop=config.t_crop, out_size=out_size)
                     for i in idx]
            frames = np.stack([c.frames for c in crops])
            labels = np.array([c.label for c in crops])
            with Tape() as tape:
                probs = forward(model, frames, training=True, rng=rng)
                loss = nll_loss(probs, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"training diverged at epoch {epoch}: loss={value}")
            grads = backward(tape, loss, params=params)
            adam_step(state, params, grads)
            epoch_losses.append(value * len(idx))
        val_loss, val_acc = validate(model, val_clips, config.t_crop)
        log.records.append(EpochRecord(
            epoch=epoch, train_loss=sum(epoch_losses) / len(order),
            val_loss=val_loss, val_acc=val_acc,
            seconds=time.perf_counter() - tic))
        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_state = model.state_dict()
            wait = 0
        else:
            wait += 1
        if wait >= config.patience:
            break
    model.load_state(best_state)
    return best_state, log
