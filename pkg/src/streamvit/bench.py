"""Streaming latency benchmark and closed-form multiply-accumulate model.

Three ways of producing the features of the newest frame ``t`` after frames
``1..t-1`` have arrived:

``cached-causal``
    one ``stream_step`` that reuses the per-layer KV cache;
``recompute-causal``
    a full causal batch forward over all ``t`` frames;
``bidirectional-full``
    a full bidirectional batch forward over all ``t`` frames (it cannot
    stream, so every new frame means recomputing everything).

MAC model, with ``n`` tokens per frame, width ``d``, LoRA rank ``r``, FFN
width ``m``, patch length ``P``, projector width ``p`` and ``L`` layers::

    frame      = n P d + L (S + N) + pool + proj
    S          = 4 n d^2 + 6 n d r + 2 n^2 d        spatial attention + LoRA
    N          = 2 n d m                            FFN
    pool       = 2 n d^2 + 2 n d + 2 d m            attention pooling
    proj       = n d p + d p                        F and f projections
    temporal   = 4 n d^2 per frame, plus 2 n d per attended key

    cached(t)    = frame + L (4 n d^2 + 2 n d t)
    recompute(t) = t * frame + L (4 n d^2 t + 2 n d t^2) = t * cached(t)

The temporal term of ``cached`` is the only one that grows with ``t``.
"""

from __future__ import annotations

import io
import logging
import statistics
import time
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .backbone import Backbone
from .config import ModelConfig
from .errors import StreamVitError, UsageError

log = logging.getLogger(__name__)

MODES = ("cached-causal", "recompute-causal", "bidirectional-full")
CSV_COLUMNS = ("mode", "t", "latency_us_median", "latency_us_p90", "cache_floats", "flops")

# reference calibration, see README "Benchmark"
CACHED_RATIO_MAX = 2.5  # cached latency at t=256 over t=16
RECOMPUTE_RATIO_MIN = 8.0  # recompute over cached latency at t=256


class BenchParityError(StreamVitError, AssertionError):
    """Cached and recomputed features disagree; timings would be meaningless."""


@dataclass(frozen=True)
class BenchRecord:
    mode: str
    t: int
    latency_us_median: float
    latency_us_p90: float
    cache_floats: int
    flops: int

    def row(self) -> list[str]:
        return [
            self.mode,
            str(self.t),
            f"{self.latency_us_median:.3f}",
            f"{self.latency_us_p90:.3f}",
            str(self.cache_floats),
            str(self.flops),
        ]


# ---------------------------------------------------------------------------
# analytic cost


def _frame_macs(cfg: ModelConfig, temporal: bool) -> int:
    n, d, r = cfg.n_tokens, cfg.d_model, cfg.lora_rank
    m, P, p = cfg.ffn_mult * cfg.d_model, cfg.patch_dim, cfg.proj_dim
    spatial = 4 * n * d * d + 6 * n * d * r + 2 * n * n * d
    ffn = 2 * n * d * m
    time_proj = 4 * n * d * d if temporal else 0
    pool = 2 * n * d * d + 2 * n * d + 2 * d * m
    proj = n * d * p + d * p
    return n * P * d + cfg.n_layers * (spatial + ffn + time_proj) + pool + proj


def flop_model(config: ModelConfig, mode: str, t: int) -> int:
    """Multiply-accumulates needed to produce frame ``t``'s features in ``mode``."""
    if t < 1:
        raise UsageError("t must be >= 1")
    temporal = config.temporal_mode != "none"
    frame = _frame_macs(config, temporal)
    attend = 2 * config.n_tokens * config.d_model * config.n_layers if temporal else 0
    if mode == "cached-causal":
        return frame + attend * t
    if mode in ("recompute-causal", "bidirectional-full"):
        return t * frame + attend * t * t
    raise UsageError(f"unknown bench mode {mode!r}; choose from {MODES}")


def cache_floats(config: ModelConfig, t: int) -> int:
    return config.n_layers * 2 * t * config.n_tokens * config.d_model


# ---------------------------------------------------------------------------
# timing


def _timer_tick_us() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e6


def time_call(fn, reps: int = 5, warmup: int = 2, min_ticks: int = 10) -> list[float]:
    """Per-call latencies in microseconds, one sample per repetition.

    If the median sample is shorter than ``min_ticks`` timer ticks, each
    sample is re-measured over a doubled inner loop until it is not.
    """
    for _ in range(warmup):
        fn()
    tick = _timer_tick_us()
    inner = 1
    while True:
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            samples.append((time.perf_counter() - t0) * 1e6 / inner)
        if statistics.median(samples) * inner >= min_ticks * tick or inner >= 1 << 20:
            return samples
        inner *= 2


def _p90(samples: Sequence[float]) -> float:
    return float(np.percentile(samples, 90))


class _FrameSource:
    """Deterministic random frames, generated on demand."""

    def __init__(self, config: ModelConfig, seed: int):
        self.shape = (config.image_size, config.image_size, 3)
        self.dtype = config.np_dtype
        self.seed = seed
        self.frames: list[np.ndarray] = []

    def clip(self, t: int) -> np.ndarray:
        while len(self.frames) < t:
            rng = np.random.default_rng([self.seed, len(self.frames)])
            self.frames.append(rng.random(self.shape).astype(self.dtype))
        return np.stack(self.frames[:t])

    def frame(self, i: int) -> np.ndarray:
        self.clip(i + 1)
        return self.frames[i]


def run_bench(
    config: ModelConfig,
    t_list: Iterable[int],
    reps: int = 5,
    warmup: int = 2,
    seed: int = 0,
    modes: Sequence[str] = MODES,
    max_batch_t: int = 1024,
    parity_tol: float = 1e-5,
    backbone: Backbone | None = None,
) -> tuple[list[BenchRecord], dict[str, float]]:
    """Time every mode at every ``t``; returns records plus latency ratios.

    Batch modes are skipped (with a warning) above ``max_batch_t`` frames,
    where their ``t x t`` score tensors stop fitting comfortably in memory.
    """
    from threadpoolctl import threadpool_limits

    t_list = sorted(set(int(t) for t in t_list))
    if not t_list or t_list[0] < 1:
        raise UsageError("t-list must contain positive frame counts")
    unknown = set(modes) - set(MODES)
    if unknown:
        raise UsageError(f"unknown bench modes {sorted(unknown)}")
    if reps < 5 or warmup < 2:
        raise UsageError("need at least 5 repetitions and 2 warmups")
    cfg = config.replace(temporal_mode="causal", max_frames=max(config.max_frames, t_list[-1]))
    bb = backbone if backbone is not None else Backbone(cfg, seed=seed)
    if bb.config != cfg:
        bb = bb.with_mode("causal")
        if bb.config.max_frames < t_list[-1]:
            raise UsageError(f"backbone max_frames {bb.config.max_frames} < {t_list[-1]}")
        cfg = bb.config
    bidir = bb.with_mode("bidirectional")
    source = _FrameSource(cfg, seed)
    session = bb.stream_open()
    records: list[BenchRecord] = []

    with threadpool_limits(limits=1):
        for t in t_list:
            while session.t_so_far < t - 1:
                session.step(source.frame(session.t_so_far))
            frame = source.frame(t - 1)
            cached_out = None

            def cached_step():
                nonlocal cached_out
                session.truncate(t - 1)
                cached_out = session.step(frame)

            if "cached-causal" in modes or "recompute-causal" in modes:
                samples = time_call(cached_step, reps, warmup)
                if "cached-causal" in modes:
                    records.append(
                        BenchRecord(
                            "cached-causal",
                            t,
                            statistics.median(samples),
                            _p90(samples),
                            session.cache_floats(),
                            flop_model(cfg, "cached-causal", t),
                        )
                    )
            batch_ok = t <= max_batch_t
            if not batch_ok and any(m != "cached-causal" for m in modes):
                log.warning("skipping batch modes at t=%d (max_batch_t=%d)", t, max_batch_t)
            if "recompute-causal" in modes and batch_ok:
                clip = source.clip(t)
                _, feats = bb.forward_clip(clip)
                dv = float(np.abs(feats.v.data - cached_out.v.data).max())
                dF = float(np.abs(feats.F.data[-1] - cached_out.F.data[0]).max())
                if max(dv, dF) > parity_tol:
                    raise BenchParityError(f"cached vs recompute features differ by {max(dv, dF):.3g} at t={t}")
                samples = time_call(lambda: bb.forward_clip(clip), reps, warmup)
                records.append(
                    BenchRecord(
                        "recompute-causal",
                        t,
                        statistics.median(samples),
                        _p90(samples),
                        0,
                        flop_model(cfg, "recompute-causal", t),
                    )
                )
            if "bidirectional-full" in modes and batch_ok:
                clip = source.clip(t)
                samples = time_call(lambda: bidir.forward_clip(clip), reps, warmup)
                records.append(
                    BenchRecord(
                        "bidirectional-full",
                        t,
                        statistics.median(samples),
                        _p90(samples),
                        0,
                        flop_model(cfg, "bidirectional-full", t),
                    )
                )
    bb.stream_close(session)
    return records, summarize(records)


def summarize(records: Sequence[BenchRecord]) -> dict[str, float]:
    by = {(r.mode, r.t): r.latency_us_median for r in records}
    cached_ts = sorted(t for m, t in by if m == "cached-causal")
    out: dict[str, float] = {}
    if cached_ts:
        lo, hi = cached_ts[0], cached_ts[-1]
        out["t_min"], out["t_max"] = lo, hi
        out["cached_ratio"] = by[("cached-causal", hi)] / by[("cached-causal", lo)]
        if ("recompute-causal", hi) in by:
            out["recompute_over_cached"] = by[("recompute-causal", hi)] / by[("cached-causal", hi)]
    return out


def format_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in records:
        buf.write(",".join(r.row()) + "\n")
    return buf.getvalue()


def write_csv(records: Sequence[BenchRecord], out: TextIO) -> None:
    out.write(format_csv(records))


def parse_csv(text: str) -> list[BenchRecord]:
    lines = text.strip().splitlines()
    if not lines or tuple(lines[0].split(",")) != CSV_COLUMNS:
        raise ValueError("not a bench CSV")
    out = []
    for line in lines[1:]:
        mode, t, med, p90, cf, fl = line.split(",")
        out.append(BenchRecord(mode, int(t), float(med), float(p90), int(cf), int(fl)))
    return out
