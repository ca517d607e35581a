"""Experiment runner: config in, metrics/checkpoints/training curves out.

One experiment = generate-or-load dataset, train each requested architecture,
evaluate on the test split under the multi-view protocol, optionally train a
frame-difference stream model and fuse prediction scores.  Everything written
to the output directory is a pure function of (config, seed): metrics.json
and checkpoints are byte-identical across reruns.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .cells import param_count
from .config import ConfigError, ExperimentConfig
from .data import (SplitData, SynthSpec, VideoClip, accuracy_from_scores,
                   dataset_manifest, evaluate, framediff_stream,
                   generate_dataset, score_clips)
from .model import Model, ModelConfig, build_model, fuse_streams
from .storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .training import TrainLog, train


def conv_mult_estimate(t: int, n1: int, n2: int, k1: int, k2: int,
                       o_x: int, o_h: int) -> int:
    """Multiplication-count estimate for the convolutional recurrence."""
    return 3 * t * n1 * n2 * k1 * k2 * (o_x * o_h + o_h * o_h)


def fc_mult_estimate(t: int, n1: int, n2: int, o_x: int, o_h: int) -> int:
    """Estimate for the hypothetical fully-connected recurrence on the same maps."""
    return 3 * t * (n1 * n2) ** 2 * (o_x * o_h + o_h * o_h)


def describe_model(cfg: ExperimentConfig) -> dict:
    """Per-level shapes, exact parameter counts, and multiplication estimates.

    The multiplication numbers are formula-based estimates (constant factors
    are implementation-dependent), not measured operation counts.
    """
    arch = cfg.model.architecture
    levels = cfg.backbone.level_shapes()
    k = cfg.model.kernel_size
    t = cfg.train.t_crop
    per_level = []
    if arch == "fc_gru_baseline":
        c, h, w = levels[-1]
        o_h = cfg.model.hidden_widths[0]
        per_level.append({
            "level": len(levels) - 1,
            "input_map": [c, h, w],
            "hidden_width": o_h,
            "recurrence": "fully_connected",
            "param_count": 3 * (c * o_h + o_h * o_h) + 3 * o_h,
        })
    else:
        directions = 2 if arch == "bidir_gru_rcn" else 1
        for l, ((c, h, w), o_h) in enumerate(zip(levels, cfg.model.hidden_widths)):
            entry = {
                "level": l,
                "input_map": [c, h, w],
                "hidden_width": o_h,
                "kernel": [k, k],
                "param_count": directions * param_count(k, k, c, o_h, include_bias=True),
                "conv_mult_estimate": directions * conv_mult_estimate(t, h, w, k, k, c, o_h),
                "fc_mult_estimate": directions * fc_mult_estimate(t, h, w, c, o_h),
            }
            if arch == "stacked_gru_rcn" and l > 0:
                below = cfg.model.hidden_widths[l - 1]
                entry["param_count"] = param_count(k, k, c, o_h, include_bias=True,
                                                   below_channels=below)
            per_level.append(entry)
    return {
        "architecture": arch,
        "time_steps": t,
        "levels": per_level,
        "total_recurrent_params": sum(e["param_count"] for e in per_level),
        "notes": "multiplication columns are formula estimates, not measured counts",
    }


def _load_splits(path) -> tuple[SynthSpec, dict[str, SplitData]]:
    manifest, raw_splits = load_dataset(path)
    spec = SynthSpec(**{**manifest["spec"],
                        "sprite_kinds": tuple(manifest["spec"]["sprite_kinds"]),
                        "sprite_sizes": tuple(manifest["spec"]["sprite_sizes"]),
                        "speeds": tuple(manifest["spec"]["speeds"])})
    splits = {}
    for name, clips in raw_splits.items():
        split = SplitData()
        for frames, label in clips:
            split.clips.append(VideoClip(frames=frames, label=label))
        splits[name] = split
    return spec, splits


def prepare_dataset(cfg: ExperimentConfig):
    if cfg.dataset_path is not None:
        if not Path(cfg.dataset_path).exists():
            raise ConfigError(f"key 'dataset.path': {cfg.dataset_path} does not exist")
        return _load_splits(cfg.dataset_path)
    return cfg.synth, generate_dataset(cfg.synth, cfg.split_counts, cfg.seed)


def generate_to_dir(cfg: ExperimentConfig, out_dir) -> Path:
    """The `generate` verb: write the synthesized dataset as a directory."""
    splits = generate_dataset(cfg.synth, cfg.split_counts, cfg.seed)
    manifest = dataset_manifest(cfg.synth, cfg.seed, splits)
    out = Path(out_dir)
    save_dataset(out, manifest, {name: s.clips for name, s in splits.items()})
    return out


def _seed_for(cfg_seed: int, purpose: int, variant: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(cfg_seed, spawn_key=(purpose, variant))


def _stream_clips(clips, stream: str):
    if stream == "framediff":
        return [framediff_stream(c) for c in clips]
    return clips


def train_and_evaluate(cfg: ExperimentConfig, architecture: str, splits: dict,
                       stream: str = "rgb", variant: int = 0):
    """Build, train and score one architecture; returns (model, log, scores)."""
    model_cfg = ModelConfig(
        architecture=architecture,
        hidden_widths=(cfg.model.hidden_widths if architecture != "fc_gru_baseline"
                       else (cfg.model.hidden_widths[-1],)),
        kernel_size=cfg.model.kernel_size,
        dropout_rate=cfg.model.dropout_rate,
        class_count=cfg.model.class_count,
        stream=stream,
    )
    rng = np.random.default_rng(_seed_for(cfg.seed, 1, variant))
    model = build_model(model_cfg, cfg.backbone, rng,
                        freeze_backbone=cfg.freeze_backbone)
    clip_splits = {name: _stream_clips(s.clips, stream) for name, s in splits.items()}
    if cfg.train.epochs > 0:
        _, log = train(model, clip_splits, cfg.train, _seed_for(cfg.seed, 2, variant))
    else:
        log = TrainLog()
    scores = score_clips(model, clip_splits["test"], cfg.protocol)
    return model, log, scores


def _arch_report(cfg: ExperimentConfig, model: Model, log: TrainLog,
                 result, tag: str) -> dict:
    return {
        "test_accuracy": result.accuracy,
        "per_class_accuracy": result.per_class_accuracy(),
        "confusion": result.confusion.tolist(),
        "param_count_total": int(sum(t.size for t in model.parameters())),
        "best_epoch": log.best_epoch,
        "epochs_run": len(log.records),
        "trainlog": f"trainlog_{tag}.jsonl",
        "checkpoint": f"checkpoint_{tag}.ckpt",
    }


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the configured experiment end to end and write all artifacts.

    Writes metrics.json, one trainlog_<tag>.jsonl and checkpoint_<tag>.ckpt
    per trained model, and returns the metrics dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth, splits = prepare_dataset(cfg)
    test_labels = [c.label for c in splits["test"].clips]
    classes = synth.class_count

    architectures = cfg.compare_architectures or (cfg.model.architecture,)
    report = {
        "seed": cfg.seed,
        "class_names": synth.class_names(),
        "splits": {name: len(s.clips) for name, s in splits.items()},
        "model_description": describe_model(cfg),
        "architectures": {},
        "fusion": None,
    }
    appearance_scores = {}
    for i, arch in enumerate(architectures):
        model, log, scores = train_and_evaluate(cfg, arch, splits,
                                                stream=cfg.model.stream, variant=i)
        result = accuracy_from_scores(scores, test_labels, classes)
        report["architectures"][arch] = _arch_report(cfg, model, log, result, arch)
        (out / f"trainlog_{arch}.jsonl").write_text(log.to_jsonl())
        save_checkpoint(out / f"checkpoint_{arch}.ckpt", model.named_parameters())
        appearance_scores[arch] = scores

    if cfg.fusion_enabled:
        fusion_arch = architectures[-1]
        tag = f"{fusion_arch}_framediff"
        fd_model, fd_log, fd_scores = train_and_evaluate(
            cfg, fusion_arch, splits, stream="framediff",
            variant=100 + len(architectures))
        fd_result = accuracy_from_scores(fd_scores, test_labels, classes)
        (out / f"trainlog_{tag}.jsonl").write_text(fd_log.to_jsonl())
        save_checkpoint(out / f"checkpoint_{tag}.ckpt", fd_model.named_parameters())
        w_a, w_m = cfg.fusion_weights
        fused = fuse_streams(appearance_scores[fusion_arch], fd_scores, w_a, w_m)
        fused_result = accuracy_from_scores(fused.data, test_labels, classes)
        report["fusion"] = {
            "architecture": fusion_arch,
            "weights": [w_a, w_m],
            "appearance_accuracy": report["architectures"][fusion_arch]["test_accuracy"],
            "motion_stream": _arch_report(cfg, fd_model, fd_log, fd_result, tag),
            "fused_accuracy": fused_result.accuracy,
            "fused_confusion": fused_result.confusion.tolist(),
        }

    with open(out / "metrics.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint_path) -> dict:
    """Re-score a saved checkpoint on the test split (reproducibility check)."""
    synth, splits = prepare_dataset(cfg)
    rng = np.random.default_rng(_seed_for(cfg.seed, 1, 0))
    model = build_model(cfg.model, cfg.backbone, rng,
                        freeze_backbone=cfg.freeze_backbone)
    model.load_state(load_checkpoint(checkpoint_path))
    clips = _stream_clips(splits["test"].clips, cfg.model.stream)
    result = evaluate(model, clips, cfg.protocol)
    return {
        "test_accuracy": result.accuracy,
        "per_class_accuracy": result.per_class_accuracy(),
        "confusion": result.confusion.tolist(),
        "n_clips": result.n_clips,
    }
