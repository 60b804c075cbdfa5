"""Deterministic moving-shape videos with exact labels at every granularity.

A scene is one coloured shape sliding in a straight line over a black
background while it is visible. Geometry is integer-only, so masks, frame
labels and intervals are all computed from the scene description rather
than read back from rendered pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SpecError
from .losses import BACKGROUND
from .text import TEMPLATES, Task, apply_template

SHAPES = ("square", "circle", "triangle")
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
COLOR_NAMES = tuple(COLORS)
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
N_CLASSES = len(SHAPES) * len(COLORS)

# global tasks summarise a clip by its last frame, so the object stays visible throughout
_FULLY_VISIBLE = (Task.AR, Task.VTR)


def class_name(class_id: int) -> str:
    shape, color = divmod(class_id, len(COLORS))
    return f"{COLOR_NAMES[color]} {SHAPES[shape]}"


def class_prompts(task: Task | str) -> list[str]:
    task = Task(task)
    if task not in TEMPLATES:
        raise ValueError(f"{task.value} is not a closed-set task")
    return [apply_template(class_name(c), task) for c in range(N_CLASSES)]


def caption_vocabulary() -> list[str]:
    """Every string the generator can emit, for building a vocabulary."""
    texts = [class_prompts(t) for t in (Task.AR, Task.VOS)]
    out = [s for group in texts for s in group]
    for color in COLORS:
        for shape in SHAPES:
            for direction in DIRECTIONS:
                out.append(f"a {color} {shape} moving {direction}")
    return out


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    frames: int = 8
    min_size: int = 14
    max_size: int = 20
    max_speed: int = 2


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    size: int
    origin: tuple[int, int]  # top-left (row, col) at t_on
    direction: str
    speed: int
    visible_interval: tuple[int, int]  # [t_on, t_off)
    n_frames: int

    @property
    def class_id(self) -> int:
        return SHAPES.index(self.shape) * len(COLORS) + COLOR_NAMES.index(self.color)

    @property
    def velocity(self) -> tuple[int, int]:
        dy, dx = DIRECTIONS[self.direction]
        return dy * self.speed, dx * self.speed

    def position(self, t: int) -> tuple[int, int]:
        vy, vx = self.velocity
        dt = t - self.visible_interval[0]
        return self.origin[0] + vy * dt, self.origin[1] + vx * dt

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} moving {self.direction}"

    def validate(self, image_size: int) -> None:
        t_on, t_off = self.visible_interval
        if not 0 <= t_on < t_off <= self.n_frames:
            raise SpecError(f"bad visible interval {self.visible_interval} for {self.n_frames} frames")
        if self.size > image_size:
            raise SpecError(f"shape size {self.size} exceeds image size {image_size}")
        for t in (t_on, t_off - 1):
            y, x = self.position(t)
            if not (0 <= y and y + self.size <= image_size and 0 <= x and x + self.size <= image_size):
                raise SpecError(f"shape leaves the frame at t={t}")


def shape_stencil(shape: str, k: int) -> np.ndarray:
    """Boolean ``k x k`` footprint, integer arithmetic only."""
    r = np.arange(k)[:, None]
    c = np.arange(k)[None, :]
    if shape == "square":
        return np.ones((k, k), dtype=bool)
    if shape == "circle":
        # pixel centres inside the inscribed circle, all in doubled coordinates
        return (2 * r + 1 - k) ** 2 + (2 * c + 1 - k) ** 2 <= k * k
    if shape == "triangle":
        # isosceles: apex on the top row, half-width growing half a pixel per
        # row, so the full base is reached only on the bottom row
        return np.abs(2 * c + 1 - k) <= r + 1
    raise SpecError(f"unknown shape {shape!r}")


def render(scene: SceneSpec, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``[T, H, W, 3]`` float32 and masks ``[T, H, W]`` int (class id or background)."""
    scene.validate(image_size)
    T, H = scene.n_frames, image_size
    frames = np.zeros((T, H, H, 3), dtype=np.float32)
    masks = np.full((T, H, H), BACKGROUND, dtype=np.int64)
    stencil = shape_stencil(scene.shape, scene.size)
    color = np.asarray(COLORS[scene.color], dtype=np.float32)
    k = scene.size
    for t in range(*scene.visible_interval):
        y, x = scene.position(t)
        frames[t, y : y + k, x : x + k][stencil] = color
        masks[t, y : y + k, x : x + k][stencil] = scene.class_id
    return frames, masks


def frame_labels(scene: SceneSpec) -> np.ndarray:
    labels = np.full(scene.n_frames, BACKGROUND, dtype=np.int64)
    t_on, t_off = scene.visible_interval
    labels[t_on:t_off] = scene.class_id
    return labels


def sample_scene(seed: int, index: int, config: DataConfig, full_visibility: bool) -> SceneSpec:
    """Draw scene ``index`` of stream ``seed``; the class is ``index mod 9`` (stratified)."""
    class_id = index % N_CLASSES
    shape_idx, color_idx = divmod(class_id, len(COLORS))
    rng = np.random.default_rng([seed, index])
    T, H = config.frames, config.image_size
    if config.max_size > H or config.min_size < 1 or config.min_size > config.max_size:
        raise SpecError(f"shape sizes [{config.min_size}, {config.max_size}] do not fit a {H}px frame")
    size = int(rng.integers(config.min_size, config.max_size + 1))
    if full_visibility:
        t_on, t_off = 0, T
    else:
        length = int(rng.integers(max(1, T // 4), T + 1))
        t_on = int(rng.integers(0, T - length + 1))
        t_off = t_on + length
    direction = list(DIRECTIONS)[int(rng.integers(len(DIRECTIONS)))]
    room = H - size
    span = t_off - t_on - 1
    speed = min(config.max_speed, room // span) if span else config.max_speed
    if speed < 1:
        raise SpecError(f"a {size}px shape cannot move for {span + 1} frames in a {H}px frame")
    travel = speed * span
    dy, dx = DIRECTIONS[direction]
    # the moving axis needs room for the whole path, the other axis only for the shape
    lo_y, hi_y = (travel if dy < 0 else 0), (room - travel if dy > 0 else room)
    lo_x, hi_x = (travel if dx < 0 else 0), (room - travel if dx > 0 else room)
    origin = (int(rng.integers(lo_y, hi_y + 1)), int(rng.integers(lo_x, hi_x + 1)))
    return SceneSpec(
        shape=SHAPES[shape_idx],
        color=COLOR_NAMES[color_idx],
        size=size,
        origin=origin,
        direction=direction,
        speed=int(speed),
        visible_interval=(t_on, t_off),
        n_frames=T,
    )


@dataclass
class SyntheticSample:
    scene: SceneSpec
    frames: np.ndarray  # [T, H, W, 3]
    masks: np.ndarray  # [T, H, W]

    @property
    def class_id(self) -> int:
        return self.scene.class_id

    @property
    def caption(self) -> str:
        return self.scene.caption

    @property
    def frame_labels(self) -> np.ndarray:
        return frame_labels(self.scene)

    @property
    def interval(self) -> tuple[int, int]:
        return self.scene.visible_interval


def make_sample(seed: int, index: int, config: DataConfig, task: Task | str = Task.TAL) -> SyntheticSample:
    scene = sample_scene(seed, index, config, Task(task) in _FULLY_VISIBLE)
    frames, masks = render(scene, config.image_size)
    return SyntheticSample(scene, frames, masks)


@dataclass
class TaskBatch:
    """One mini-batch for exactly one task.

    ``texts`` holds the class prompts for closed-set tasks and one caption per
    video for free-form tasks. Only the label field the task's loss needs is
    populated.
    """

    task: Task
    frames: np.ndarray  # [B, T, H, W, 3]
    texts: list[str]
    class_ids: np.ndarray | None = None  # [B]
    frame_labels: np.ndarray | None = None  # [B, T]
    intervals: np.ndarray | None = None  # [B, 2]
    masks: np.ndarray | None = None  # [B, T, H, W]
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.frames.shape[0]


def generate(
    seed: int,
    config: DataConfig,
    task: Task | str,
    batch_size: int = 16,
    indices: Sequence[int] | None = None,
) -> TaskBatch:
    task = Task(task)
    idx = np.arange(batch_size) if indices is None else np.asarray(indices, dtype=np.int64)
    samples = [make_sample(seed, int(i), config, task) for i in idx]
    frames = np.stack([s.frames for s in samples])
    batch = TaskBatch(task=task, frames=frames, texts=[], indices=idx)
    if task in TEMPLATES:
        batch.texts = class_prompts(task)
    else:
        batch.texts = [s.caption for s in samples]
    if task == Task.AR:
        batch.class_ids = np.array([s.class_id for s in samples], dtype=np.int64)
    elif task == Task.TAL:
        batch.frame_labels = np.stack([s.frame_labels for s in samples])
    elif task == Task.TVG:
        batch.intervals = np.array([s.interval for s in samples], dtype=np.int64)
    elif task == Task.VOS:
        batch.masks = np.stack([s.masks for s in samples])
    elif task == Task.RVOS:
        batch.masks = (np.stack([s.masks for s in samples]) != BACKGROUND).astype(np.int64)
    return batch


def dump_samples(samples: Sequence[SyntheticSample], directory: str | Path) -> list[Path]:
    """Write each sample as a container file: frames, masks and scene metadata."""
    from .checkpoint import write_container

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        sc = s.scene
        meta = {
            "kind": "synthetic-sample",
            "shape": sc.shape,
            "color": sc.color,
            "size": str(sc.size),
            "origin": f"{sc.origin[0]},{sc.origin[1]}",
            "direction": sc.direction,
            "speed": str(sc.speed),
            "visible_interval": f"{sc.visible_interval[0]},{sc.visible_interval[1]}",
            "n_frames": str(sc.n_frames),
            "class_id": str(sc.class_id),
        }
        path = directory / f"sample_{i:05d}.svc"
        write_container(path, meta, {"frames": s.frames, "masks": s.masks, "frame_labels": s.frame_labels})
        paths.append(path)
    return paths
