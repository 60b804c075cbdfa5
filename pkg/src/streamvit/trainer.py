"""Multitask training: round-robin task batches, gradient accumulation, Adam."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import Parameter, Tape, Tensor, zero_grads
from .checkpoint import read_container, write_container
from .config import ModelConfig, preset
from .data import DataConfig, TaskBatch, generate
from .errors import CheckpointError, ConfigError, NonFiniteError, StateError, TrainingError, UsageError
from .losses import loss_ar, loss_rvos, loss_tal, loss_tvg, loss_vos, loss_vtr
from .model import StreamModel
from .text import TASK_ORDER, Task, Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "streamvit-checkpoint"
CHECKPOINT_VERSION = "1"
PIXEL_TASKS = (Task.VOS, Task.RVOS)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    preset: str = "desk"
    lr: float = 3e-4
    steps: int = 300
    seed: int = 0
    batch_global: int = 16
    batch_pixel: int = 4
    frames: int = 8
    pool_size: int = 4096
    freeze_text: bool = False
    checkpoint: str = ""
    metrics: str = ""
    log_every: int = 25

    def model_config(self) -> ModelConfig:
        return preset(self.preset)

    def data_config(self, model_config: ModelConfig) -> DataConfig:
        return DataConfig(image_size=model_config.image_size, frames=self.frames)

    def batch_size(self, task: Task) -> int:
        return self.batch_pixel if task in PIXEL_TASKS else self.batch_global

    def to_dict(self) -> dict[str, str]:
        return {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, items: Mapping[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"unknown training option {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                elif kind == "bool":
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kwargs[key] = raw.lower() in ("true", "1", "yes")
                else:
                    kwargs[key] = raw
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)


def load_train_config(path: str | Path) -> TrainConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    items = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        items[key.strip()] = value.strip()
    return TrainConfig.from_dict(items)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, Parameter]], lr: float) -> None:
        """One update of every non-frozen parameter from its accumulated grad."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params:
            if p.frozen:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            dt = p.data.dtype.type
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(lr) * update


def optimize(params: list[tuple[str, Parameter]], optimizer: Adam, lr: float) -> None:
    optimizer.step(params, lr)


def balance_schedule(sizes: Mapping[Task, int], rng: np.random.Generator) -> dict[Task, np.ndarray]:
    """One epoch of sample indices per task, every task visiting ``max(sizes)`` samples.

    The largest tasks are walked as a permutation; smaller ones are
    over-sampled with replacement.
    """
    if any(n < 1 for n in sizes.values()):
        raise ConfigError("every task needs at least one sample")
    n = max(sizes.values())
    plan = {}
    for task, size in sizes.items():
        plan[task] = rng.permutation(n) if size == n else rng.integers(0, size, size=n)
    return plan


# ---------------------------------------------------------------------------
# losses per task


def task_loss(model: StreamModel, batch: TaskBatch) -> Tensor:
    bb = model.backbone
    hidden = bb.forward(batch.frames)
    texts = model.text.encode(batch.texts)
    task = batch.task
    if task in (Task.AR, Task.VTR):
        v = bb.global_feature(bb.temporal_features(hidden))
        if task == Task.AR:
            return loss_ar(v, texts, batch.class_ids, model.head)
        return loss_vtr(v, texts, model.head)
    if task in (Task.TAL, Task.TVG):
        f = bb.temporal_features(hidden)
        if task == Task.TAL:
            return loss_tal(f, texts, batch.frame_labels, model.head)
        return loss_tvg(f, texts, batch.intervals, model.head)
    F = bb.spatial_features(hidden)
    if task == Task.VOS:
        return loss_vos(F, texts, batch.masks, model.head)
    return loss_rvos(F, texts, batch.masks, model.head)


def round_robin_step(
    model: StreamModel,
    batches: Mapping[Task, TaskBatch],
    optimizer: Adam,
    lr: float,
    step: int = 0,
) -> dict[Task, float]:
    """Forward/backward each task in fixed order, accumulating grads; then one update."""
    missing = [t.value for t in TASK_ORDER if t not in batches]
    if missing:
        raise UsageError(f"round-robin step needs a batch for every task; missing {missing}")
    named = model.named_parameters()
    if any(p.grad.any() for _, p in named):
        raise StateError("gradients must be zeroed before a round-robin step")
    losses = {}
    for task in TASK_ORDER:
        try:
            with Tape() as tape:
                loss = task_loss(model, batches[task])
        except NonFiniteError:
            raise TrainingError(task.value, step, math.nan) from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(task.value, step, value)
        tape.backward(loss)
        losses[task] = value
    optimizer.step(named, lr)
    zero_grads(p for _, p in named)
    return losses


# ---------------------------------------------------------------------------
# training state and loop


@dataclass
class TrainState:
    step: int = 0
    seed: int = 0
    optimizer: Adam = field(default_factory=Adam)
    history: dict[Task, list[float]] = field(default_factory=lambda: {t: [] for t in TASK_ORDER})


def task_seed(seed: int, task: Task) -> int:
    return seed * 1000 + TASK_ORDER.index(task)


def heldout_seed(seed: int) -> int:
    return seed * 1000 + 999


class Trainer:
    def __init__(self, config: TrainConfig, model: StreamModel | None = None, state: TrainState | None = None):
        self.config = config
        self.model = model or StreamModel(config.model_config(), seed=config.seed, freeze_text=config.freeze_text)
        mc = self.model.config
        self.data_config = config.data_config(mc)
        if self.data_config.image_size != mc.image_size:
            raise ConfigError("data resolution must match the model image size")
        if self.data_config.frames > mc.max_frames:
            raise ConfigError(f"{self.data_config.frames} frames exceed max_frames {mc.max_frames}")
        self.state = state or TrainState(seed=config.seed)
        self._plans: dict[int, dict[Task, np.ndarray]] = {}

    def _plan(self, epoch: int) -> dict[Task, np.ndarray]:
        plan = self._plans.get(epoch)
        if plan is None:
            sizes = {t: self.config.pool_size for t in TASK_ORDER}
            plan = balance_schedule(sizes, np.random.default_rng([self.state.seed, epoch]))
            self._plans = {epoch: plan}
        return plan

    def batch(self, task: Task, step: int) -> TaskBatch:
        """The deterministic batch ``task`` sees at ``step``."""
        bs = self.config.batch_size(task)
        n = self.config.pool_size
        positions = step * bs + np.arange(bs)
        indices = np.empty(bs, dtype=np.int64)
        for i, pos in enumerate(positions):
            epoch, offset = divmod(int(pos), n)
            indices[i] = self._plan(epoch)[task][offset]
        return generate(task_seed(self.state.seed, task), self.data_config, task, indices=indices)

    def batches(self, step: int) -> dict[Task, TaskBatch]:
        return {t: self.batch(t, step) for t in TASK_ORDER}

    def step(self) -> dict[Task, float]:
        step = self.state.step
        losses = round_robin_step(self.model, self.batches(step), self.state.optimizer, self.config.lr, step)
        for t, v in losses.items():
            self.state.history[t].append(v)
        self.state.step += 1
        return losses

    def run(self, steps: int | None = None, callback: Callable[[int, dict], None] | None = None) -> TrainState:
        steps = self.config.steps if steps is None else steps
        metrics = None
        writer = None
        if self.config.metrics:
            path = Path(self.config.metrics)
            fresh = not path.exists() or self.state.step == 0
            metrics = path.open("w" if fresh else "a", newline="")
            writer = csv.writer(metrics)
            if fresh:
                writer.writerow(["step"] + [t.value for t in TASK_ORDER] + ["wall_ms"])
        try:
            for _ in range(steps):
                t0 = time.perf_counter()
                losses = self.step()
                ms = (time.perf_counter() - t0) * 1e3
                if writer is not None:
                    writer.writerow([self.state.step - 1] + [repr(losses[t]) for t in TASK_ORDER] + [f"{ms:.1f}"])
                if self.config.log_every and (self.state.step - 1) % self.config.log_every == 0:
                    log.info(
                        "step %d %s (%.0f ms)",
                        self.state.step - 1,
                        " ".join(f"{t.value}={losses[t]:.4f}" for t in TASK_ORDER),
                        ms,
                    )
                if callback is not None:
                    callback(self.state.step - 1, losses)
        finally:
            if metrics is not None:
                metrics.close()
        if self.config.checkpoint:
            self.save(self.config.checkpoint)
        return self.state

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, self.state, self.config)

    @classmethod
    def resume(cls, path: str | Path, **overrides) -> "Trainer":
        ckpt = load_checkpoint(path)
        config = ckpt.train_config or TrainConfig()
        for key, value in overrides.items():
            setattr(config, key, value)
        return cls(config, model=ckpt.model, state=ckpt.state)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: StreamModel
    state: TrainState | None
    train_config: TrainConfig | None


def save_checkpoint(
    path: str | Path,
    model: StreamModel,
    state: TrainState | None = None,
    train_config: TrainConfig | None = None,
) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION}
    meta.update({f"model.{k}": v for k, v in model.config.to_dict().items()})
    meta["vocab.buckets"] = str(model.vocab.n_buckets)
    meta["vocab.tokens"] = " ".join(model.vocab.tokens)
    meta["text.frozen"] = str(model.text.embedding.frozen)
    tensors = {f"param.{name}": p.data for name, p in model.named_parameters()}
    if state is not None:
        opt = state.optimizer
        meta["state.step"] = str(state.step)
        meta["state.seed"] = str(state.seed)
        meta["adam.t"] = str(opt.t)
        meta["adam.hyper"] = f"{opt.beta1!r} {opt.beta2!r} {opt.eps!r}"
        for name in sorted(opt.m):
            tensors[f"adam.m.{name}"] = opt.m[name]
            tensors[f"adam.v.{name}"] = opt.v[name]
        meta["state.history"] = json.dumps({t.value: state.history[t] for t in TASK_ORDER}, separators=(",", ":"))
    if train_config is not None:
        meta.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    write_container(path, meta, tensors)


def _prefixed(meta: Mapping[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in meta.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse and validate a checkpoint completely before building any objects from it."""
    meta, tensors = read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a model checkpoint (format={meta.get('format')!r})")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    try:
        config = ModelConfig.from_dict(_prefixed(meta, "model."))
        tokens = meta.get("vocab.tokens", "").split()
        vocab = Vocabulary(tokens, n_buckets=int(meta["vocab.buckets"]))
        train_items = _prefixed(meta, "train.")
        train_config = TrainConfig.from_dict(train_items) if train_items else None
    except (ConfigError, KeyError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint metadata: {e}") from None

    model = StreamModel(config, vocab=vocab, freeze_text=meta.get("text.frozen") == "True")
    named = dict(model.named_parameters())
    stored = _prefixed(tensors, "param.")
    if set(stored) != set(named):
        missing = sorted(set(named) - set(stored))[:3]
        extra = sorted(set(stored) - set(named))[:3]
        raise CheckpointError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, arr in stored.items():
        p = named[name]
        if arr.shape != p.shape or arr.dtype != p.dtype:
            raise CheckpointError(f"{name}: stored {arr.dtype}{arr.shape} vs model {p.dtype}{p.shape}")
        if not np.isfinite(arr).all():
            raise CheckpointError(f"{name}: non-finite values")

    state = None
    if "state.step" in meta:
        try:
            opt = Adam(*(float(x) for x in meta["adam.hyper"].split()))
            opt.t = int(meta["adam.t"])
            history_raw = json.loads(meta["state.history"])
            history = {t: [float(x) for x in history_raw[t.value]] for t in TASK_ORDER}
            state = TrainState(step=int(meta["state.step"]), seed=int(meta["state.seed"]), optimizer=opt, history=history)
        except (KeyError, ValueError, TypeError) as e:
            raise CheckpointError(f"bad training state: {e}") from None
        for name, arr in _prefixed(tensors, "adam.m.").items():
            vname = f"adam.v.{name}"
            if (
                name not in named
                or vname not in tensors
                or tensors[vname].shape != arr.shape
                or arr.shape != named[name].shape
            ):
                raise CheckpointError(f"optimizer moments for {name!r} are inconsistent")
            opt.m[name] = arr
            opt.v[name] = tensors[vname]

    for name, arr in stored.items():
        named[name].data = arr
    return Checkpoint(model=model, state=state, train_config=train_config)
