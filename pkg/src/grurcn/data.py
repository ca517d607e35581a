"""Synthetic moving-sprite video benchmark with motion-defined labels.

A clip shows one sprite translating at constant velocity over a noisy
canvas.  The label encodes the motion pattern (direction x speed); with the
appearance confound enabled, sprite shape, size and intensity are sampled
independently of the label, so appearance carries no class information.

Also provides the crop augmentation used during training and the evaluation
protocol that averages predictions over equally spaced temporal sub-volumes
and corner/center/flipped spatial crops.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import ShapeError

# Cardinal motion directions as (dy, dx) unit vectors; rows grow downward.
DIRECTIONS = (("east", (0.0, 1.0)), ("north", (-1.0, 0.0)),
              ("west", (0.0, -1.0)), ("south", (1.0, 0.0)))


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; the class count is directions x speeds."""

    canvas: int = 40
    channels: int = 1
    frames: int = 16
    sprite_kinds: tuple = ("square", "circle", "plus")
    sprite_sizes: tuple = (7, 9, 11)
    speeds: tuple = (1.0, 2.0)
    noise_amplitude: float = 0.0
    appearance_confound: bool = True
    boundary: str = "bounce"

    def __post_init__(self):
        if self.boundary not in ("bounce", "wrap"):
            raise ValueError(f"boundary must be 'bounce' or 'wrap', got {self.boundary!r}")
        if max(self.sprite_sizes) > self.canvas:
            raise ShapeError("sprite larger than canvas")
        if self.frames < 1 or not self.speeds:
            raise ValueError("need at least one frame and one speed")

    @property
    def class_count(self) -> int:
        return len(DIRECTIONS) * len(self.speeds)

    def class_names(self) -> list[str]:
        names = []
        for dname, _ in DIRECTIONS:
            for s in self.speeds:
                names.append(f"{dname}_v{s:g}")
        return names

    def class_velocity(self, label: int) -> tuple[float, float]:
        dy, dx = DIRECTIONS[label // len(self.speeds)][1]
        v = self.speeds[label % len(self.speeds)]
        return dy * v, dx * v


@dataclass
class VideoClip:
    """frames: (T, C, H, W) values in [0, 1]; label: motion class index."""

    frames: np.ndarray
    label: int


@dataclass
class ClipMeta:
    """Ground truth recorded at generation time (the oracle's input)."""

    label: int
    sprite_kind: int
    sprite_size: int
    intensity: float
    velocity: tuple
    positions: list  # (T, 2) top-left sprite coordinates

    def to_json(self) -> dict:
        d = asdict(self)
        d["velocity"] = list(self.velocity)
        d["positions"] = [list(p) for p in self.positions]
        return d


@dataclass
class SplitData:
    clips: list = field(default_factory=list)
    metas: list = field(default_factory=list)


def _sprite_mask(kind: str, size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        return np.ones((size, size))
    if kind == "circle":
        return (((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2.0) ** 2).astype(float)
    if kind == "plus":
        band = max(1, size // 3)
        lo, hi = (size - band) // 2, (size - band) // 2 + band
        mask = np.zeros((size, size))
        mask[lo:hi, :] = 1.0
        mask[:, lo:hi] = 1.0
        return mask
    if kind == "diamond":
        return ((np.abs(yy - c) + np.abs(xx - c)) <= c).astype(float)
    raise ValueError(f"unknown sprite kind {kind!r}")


def _step_position(pos, vel, size: int, canvas: int, boundary: str):
    """Advance one frame; bounce reflects inside [0, canvas-size], wrap is modular."""
    y, x = pos[0] + vel[0], pos[1] + vel[1]
    vy, vx = vel
    if boundary == "wrap":
        return (y % canvas, x % canvas), (vy, vx)
    m = canvas - size
    if y < 0:
        y, vy = -y, -vy
    elif y > m:
        y, vy = 2 * m - y, -vy
    if x < 0:
        x, vx = -x, -vx
    elif x > m:
        x, vx = 2 * m - x, -vx
    return (y, x), (vy, vx)


def _splat(frame: np.ndarray, sprite: np.ndarray, y: float, x: float,
           canvas: int, wrap: bool) -> None:
    """Add a sprite at a sub-pixel position via bilinear placement."""
    size = sprite.shape[-1]
    iy, ix = int(np.floor(y)), int(np.floor(x))
    fy, fx = y - iy, x - ix
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        if wt == 0.0:
            continue
        ys = np.arange(iy + dy, iy + dy + size)
        xs = np.arange(ix + dx, ix + dx + size)
        if wrap:
            ys, xs = ys % canvas, xs % canvas
        frame[:, ys[:, None], xs[None, :]] += wt * sprite


def _generate_clip(rng, spec: SynthSpec, label: int):
    n_kinds, n_sizes = len(spec.sprite_kinds), len(spec.sprite_sizes)
    if spec.appearance_confound:
        kind = int(rng.integers(n_kinds))
        size = int(spec.sprite_sizes[rng.integers(n_sizes)])
        intensity = float(rng.uniform(0.5, 1.0))
    else:
        kind = label % n_kinds
        size = int(spec.sprite_sizes[label % n_sizes])
        intensity = 1.0
    vel = spec.class_velocity(label)
    hi = spec.canvas if spec.boundary == "wrap" else spec.canvas - size
    pos = (float(rng.uniform(0, hi)), float(rng.uniform(0, hi)))

    sprite = _sprite_mask(spec.sprite_kinds[kind], size) * intensity
    frames = np.zeros((spec.frames, spec.channels, spec.canvas, spec.canvas))
    positions = []
    v = vel
    for t in range(spec.frames):
        positions.append(pos)
        _splat(frames[t], sprite[None], pos[0], pos[1],
               spec.canvas, spec.boundary == "wrap")
        pos, v = _step_position(pos, v, size, spec.canvas, spec.boundary)
    if spec.noise_amplitude > 0:
        frames += rng.uniform(0.0, spec.noise_amplitude, size=frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    meta = ClipMeta(label=label, sprite_kind=kind, sprite_size=size,
                    intensity=intensity, velocity=vel, positions=positions)
    return VideoClip(frames=frames, label=label), meta


def generate_dataset(spec: SynthSpec, counts: dict, seed: int) -> dict[str, SplitData]:
    """Deterministic splits with balanced motion classes.

    ``counts`` maps split name to clip count; each split draws from its own
    child seed (in dict order), so splits are disjoint by construction.
    """
    if any(n < 1 for n in counts.values()):
        raise ValueError("every split needs at least one clip")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(counts))
    out = {}
    for (name, n), child in zip(counts.items(), children):
        rng = np.random.default_rng(child)
        labels = np.array([i % spec.class_count for i in range(n)])
        rng.shuffle(labels)
        split = SplitData()
        for label in labels:
            clip, meta = _generate_clip(rng, spec, int(label))
            split.clips.append(clip)
            split.metas.append(meta)
        out[name] = split
    return out


def dataset_manifest(spec: SynthSpec, seed: int, splits: dict[str, SplitData]) -> dict:
    return {
        "spec": asdict(spec),
        "seed": seed,
        "splits": {name: len(s.clips) for name, s in splits.items()},
        "class_names": spec.class_names(),
        "labels": {name: [c.label for c in s.clips] for name, s in splits.items()},
        "meta": {name: [m.to_json() for m in s.metas] for name, s in splits.items()},
    }


def trajectory_oracle(positions, spec: SynthSpec, sprite_size: int | None = None) -> int:
    """Recover the motion class from a ground-truth trajectory.

    Wrap mode: the per-step displacement, unwrapped to the nearest image,
    equals the velocity at every step, so the per-axis median decodes it
    exactly.  Bounce mode: reflections flip displacement signs, so candidate
    trajectories are re-simulated from the observed start instead.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.shape[0] < 2:
        raise ShapeError("oracle needs at least two positions")
    if spec.boundary == "wrap":
        steps = np.diff(pos, axis=0)
        steps = (steps + spec.canvas / 2.0) % spec.canvas - spec.canvas / 2.0
        v = np.median(steps, axis=0)
        dists = [np.hypot(*(np.array(spec.class_velocity(c)) - v))
                 for c in range(spec.class_count)]
        return int(np.argmin(dists))
    if sprite_size is None:
        raise ValueError("bounce-mode oracle needs the sprite size")
    for c in range(spec.class_count):
        p, v = tuple(pos[0]), spec.class_velocity(c)
        ok = True
        for t in range(1, pos.shape[0]):
            p, v = _step_position(p, v, sprite_size, spec.canvas, "bounce")
            if np.max(np.abs(np.array(p) - pos[t])) > 1e-9:
                ok = False
                break
        if ok:
            return c
    raise ValueError("no motion class reproduces the observed trajectory")


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the trailing two axes.

    Same-size input is returned as an exact copy, and constants are preserved.
    """
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    a00 = arr[..., y0[:, None], x0[None, :]]
    a01 = arr[..., y0[:, None], x1[None, :]]
    a10 = arr[..., y1[:, None], x0[None, :]]
    a11 = arr[..., y1[:, None], x1[None, :]]
    top = a00 * (1 - fx) + a01 * fx
    bot = a10 * (1 - fx) + a11 * fx
    return top * (1 - fy) + bot * fy


def sample_crop(clip: VideoClip, rng, ladder=(32, 28, 24, 21), t_crop: int = 10,
                out_size: int = 32) -> VideoClip:
    """Random scale-augmentation crop: sampled spatial size from the ladder,
    uniform position, ``t_crop`` consecutive frames, resized to the model input."""
    frames = clip.frames
    t, _, h, w = frames.shape
    if t < t_crop:
        raise ShapeError(f"clip has {t} frames, need {t_crop}")
    if max(ladder) > min(h, w):
        raise ShapeError("largest crop exceeds the clip size")
    s = int(ladder[rng.integers(len(ladder))])
    oy = int(rng.integers(0, h - s + 1))
    ox = int(rng.integers(0, w - s + 1))
    t0 = int(rng.integers(0, t - t_crop + 1))
    crop = frames[t0:t0 + t_crop, :, oy:oy + s, ox:ox + s]
    return VideoClip(frames=bilinear_resize(crop, out_size, out_size),
                     label=clip.label)


@dataclass(frozen=True)
class EvalProtocol:
    """Test-time view averaging: V equally spaced sub-volumes, each seen as
    4 corner + 1 center crop plus horizontal flips (10 views)."""

    subvolumes: int = 5
    t_crop: int = 10
    views: str = "corners_center"  # or "center"
    include_flips: bool = True


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # [true, predicted] counts
    n_clips: int

    def per_class_accuracy(self) -> list[float]:
        totals = self.confusion.sum(axis=1)
        return [float(self.confusion[i, i] / totals[i]) if totals[i] else 0.0
                for i in range(self.confusion.shape[0])]


def _clip_views(frames: np.ndarray, protocol: EvalProtocol,
                in_h: int, in_w: int) -> np.ndarray:
    t = frames.shape[0]
    if t < protocol.t_crop:
        raise ShapeError(f"clip has {t} frames, need {protocol.t_crop}")
    h, w = frames.shape[-2:]
    dy, dx = h - in_h, w - in_w
    if dy < 0 or dx < 0:
        raise ShapeError("clip smaller than the model input")
    starts = np.round(np.linspace(0, t - protocol.t_crop,
                                  protocol.subvolumes)).astype(int)
    if protocol.views == "center":
        offsets = [(dy // 2, dx // 2)]
    else:
        offsets = [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy // 2, dx // 2)]
    views = []
    for t0 in starts:
        sub = frames[t0:t0 + protocol.t_crop]
        for oy, ox in offsets:
            crop = sub[:, :, oy:oy + in_h, ox:ox + in_w]
            views.append(crop)
            if protocol.include_flips:
                views.append(crop[:, :, :, ::-1])
    return np.ascontiguousarray(np.stack(views))


def score_clips(model, clips, protocol: EvalProtocol | None = None) -> np.ndarray:
    """Per-clip class probabilities averaged over all protocol views.

    Returns an (n_clips, classes) matrix; rows follow clip order but each row
    depends only on its own clip.
    """
    from .model import forward

    protocol = protocol or EvalProtocol()
    classes = model.config.class_count
    _, in_h, in_w = model.backbone_config.input_shape
    scores = []
    # Batch several clips' views per forward pass to keep matmuls large.
    views_per_clip = None
    group = []

    def flush():
        nonlocal group
        if not group:
            return
        probs = forward(model, np.concatenate(group)).data
        scores.append(probs.reshape(len(group), views_per_clip, classes).mean(axis=1))
        group = []

    for clip in clips:
        views = _clip_views(clip.frames, protocol, in_h, in_w)
        if views_per_clip is None:
            views_per_clip = views.shape[0]
        group.append(views)
        if len(group) * views_per_clip >= 256:
            flush()
    flush()
    return np.concatenate(scores) if scores else np.zeros((0, classes))


def accuracy_from_scores(scores: np.ndarray, labels, classes: int) -> EvalResult:
    """Argmax predictions (ties toward the lowest class index) vs labels."""
    confusion = np.zeros((classes, classes), dtype=int)
    for label, row in zip(labels, scores):
        confusion[int(label), int(np.argmax(row))] += 1
    n = int(confusion.sum())
    acc = float(np.trace(confusion) / n) if n else 0.0
    return EvalResult(accuracy=acc, confusion=confusion, n_clips=n)


def evaluate(model, clips, protocol: EvalProtocol | None = None) -> EvalResult:
    """Accuracy and confusion under the multi-view protocol.

    Per clip, the model's probability outputs are averaged over every
    sub-volume and crop view; the prediction is the argmax (ties break toward
    the lowest class index).  Clip order does not affect the result.
    """
    clips = list(clips)
    scores = score_clips(model, clips, protocol)
    return accuracy_from_scores(scores, [c.label for c in clips],
                                model.config.class_count)


def framediff_stream(clip: VideoClip) -> VideoClip:
    """Consecutive-frame differences rescaled to [0, 1]; T shrinks by one."""
    if clip.frames.shape[0] < 2:
        raise ShapeError("framediff needs at least two frames")
    d = clip.frames[1:] - clip.frames[:-1]
    return VideoClip(frames=(d + 1.0) / 2.0, label=clip.label)
