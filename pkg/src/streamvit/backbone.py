"""Streaming video encoder.

Frames are patchified, tagged with spatial and temporal position tables and
passed through a stack of divided space-time blocks::

    z -> z + tanh(gate) * TemporalAttn(LN(z))     (per spatial position, over time)
      -> x + SpatialAttn_LoRA(LN(x))              (per frame, over tokens)
      -> y + FFN(LN(y))                           (per token)

Three feature granularities come out of the last hidden states: per-patch
features ``F``, per-frame pooled features ``f`` and the global feature ``v``
(the last row of ``f``), all mapped through one shared projector and L2
normalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import ModelConfig
from .errors import CapacityError, InputError, ShapeError, StateError, UsageError


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class TemporalParams:
    ln_g: Parameter
    ln_b: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    gate: Parameter


@dataclass
class SpatialParams:
    ln_g: Parameter
    ln_b: Parameter
    wq: Parameter  # frozen base weights
    wk: Parameter
    wv: Parameter
    wo: Parameter
    qa: Parameter  # LoRA down-projections d x r
    qb: Parameter  # LoRA up-projections r x d
    ka: Parameter
    kb: Parameter
    va: Parameter
    vb: Parameter


@dataclass
class FFNParams:
    ln_g: Parameter
    ln_b: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class BlockParams:
    time: TemporalParams
    space: SpatialParams
    ffn: FFNParams


@dataclass
class PoolParams:
    query: Parameter  # d x 1
    ln_g: Parameter
    ln_b: Parameter
    wk: Parameter
    wv: Parameter
    mlp: FFNParams


def _walk(prefix: str, obj) -> list[tuple[str, Parameter]]:
    out = []
    for f in fields(obj):
        val = getattr(obj, f.name)
        name = f"{prefix}.{f.name}"
        if isinstance(val, Parameter):
            out.append((name, val))
        else:
            out.extend(_walk(name, val))
    return out


# ---------------------------------------------------------------------------
# value types


@dataclass
class VideoClip:
    """Frames ``[T, H, W, 3]`` with values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3 or f.shape[0] < 1 or f.shape[1] != f.shape[2]:
            raise InputError(f"clip frames must be [T, H, H, 3] with T >= 1, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() > 1):
            raise InputError("clip pixel values must lie in [0, 1]")
        self.frames = f

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FrameFeatures:
    """Projected features: ``v [d']``, ``f [t, d']``, ``F [t, h, w, d']``."""

    v: Tensor
    f: Tensor
    F: Tensor


# ---------------------------------------------------------------------------
# KV cache


class LayerCache:
    """Growable per-layer key/value store laid out as ``[hw, heads, time, head_dim]``.

    Rows are written in place; capacity doubles on demand (capped by
    ``max_frames``) so appending a frame is amortised O(1).
    """

    def __init__(self, n_tokens: int, n_heads: int, head_dim: int, max_frames: int, dtype, capacity: int = 16):
        self.max_frames = max_frames
        cap = min(capacity, max_frames)
        self.k = np.zeros((n_tokens, n_heads, cap, head_dim), dtype=dtype)
        self.v = np.zeros_like(self.k)

    @property
    def capacity(self) -> int:
        return self.k.shape[2]

    def matches(self, n_tokens: int, n_heads: int, head_dim: int, dtype) -> bool:
        hw, h, _, dh = self.k.shape
        return (hw, h, dh) == (n_tokens, n_heads, head_dim) and self.k.dtype == np.dtype(dtype)

    def write(self, t: int, k: np.ndarray, v: np.ndarray) -> None:
        if t >= self.max_frames:
            raise CapacityError(f"frame index {t} exceeds max_frames {self.max_frames}")
        if t >= self.capacity:
            new_cap = min(max(2 * self.capacity, t + 1), self.max_frames)
            for attr in ("k", "v"):
                old = getattr(self, attr)
                grown = np.zeros(old.shape[:2] + (new_cap,) + old.shape[3:], dtype=old.dtype)
                grown[:, :, : old.shape[2]] = old
                setattr(self, attr, grown)
        self.k[:, :, t] = k
        self.v[:, :, t] = v

    def view(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.k[:, :, :n], self.v[:, :, :n]

    def keys(self, n: int) -> np.ndarray:
        """Cached keys for the first ``n`` frames as ``[n, hw, d_model]``."""
        k = self.k[:, :, :n]
        return k.transpose(2, 0, 1, 3).reshape(n, k.shape[0], -1)

    def values(self, n: int) -> np.ndarray:
        v = self.v[:, :, :n]
        return v.transpose(2, 0, 1, 3).reshape(n, v.shape[0], -1)


class StreamSession:
    """Mutable per-video state: one KV cache per layer plus a frame counter."""

    def __init__(self, backbone: "Backbone"):
        cfg = backbone.config
        self.backbone = backbone
        self.config = cfg
        self.t_so_far = 0
        self.closed = False
        self.caches: list[LayerCache] = []
        if cfg.temporal_mode == "causal":
            self.caches = [
                LayerCache(cfg.n_tokens, cfg.n_heads, cfg.head_dim, cfg.max_frames, cfg.np_dtype)
                for _ in range(cfg.n_layers)
            ]

    def cache_floats(self) -> int:
        cfg = self.config
        return len(self.caches) * 2 * self.t_so_far * cfg.n_tokens * cfg.d_model

    def truncate(self, t: int) -> None:
        """Forget every frame from index ``t`` on."""
        if not 0 <= t <= self.t_so_far:
            raise StateError(f"cannot truncate a session at {self.t_so_far} frames to {t}")
        self.t_so_far = t

    def step(self, frame: np.ndarray) -> FrameFeatures:
        return self.backbone.stream_step(self, frame)

    def close(self) -> None:
        self.backbone.stream_close(self)


# ---------------------------------------------------------------------------
# sub-layers


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """``M[i, j] = 0`` when ``i >= j`` and ``-inf`` otherwise."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def _split_heads(x: Tensor, n_heads: int, order: tuple[int, ...]) -> Tensor:
    # x: [..., T, hw, d] -> [..., T, hw, H, dh] -> permuted by ``order`` over the last four axes
    lead = x.shape[:-3]
    T, hw, d = x.shape[-3:]
    y = ad.reshape(x, lead + (T, hw, n_heads, d // n_heads))
    n = len(lead)
    return ad.transpose(y, tuple(range(n)) + tuple(n + o for o in order))


def _merge_heads(x: Tensor, order: tuple[int, ...]) -> Tensor:
    # inverse of _split_heads
    n = x.ndim - 4
    inv = tuple(int(i) for i in np.argsort(order))
    y = ad.transpose(x, tuple(range(n)) + tuple(n + o for o in inv))
    lead = y.shape[:-2]
    return ad.reshape(y, lead + (y.shape[-2] * y.shape[-1],))


_TIME_ORDER = (1, 2, 0, 3)  # [T, hw, H, dh] -> [hw, H, T, dh]
_SPACE_ORDER = (0, 2, 1, 3)  # [T, hw, H, dh] -> [T, H, hw, dh]


def temporal_attention(
    z: Tensor,
    p: TemporalParams,
    n_heads: int,
    causal: bool = True,
    cache: LayerCache | None = None,
    t: int = 0,
) -> Tensor:
    """Gated attention along time at each spatial position.

    Batch mode: ``z`` is ``[..., T, hw, d]``. Streaming mode (``cache`` given):
    ``z`` is one frame ``[1, hw, d]`` at absolute index ``t``; its keys and
    values are appended to the cache before it attends over frames ``0..t``.
    """
    d = z.shape[-1]
    dh = d // n_heads
    h = ad.layer_norm(z, p.ln_g, p.ln_b)
    q = ad.matmul(h, p.wq)
    k = ad.matmul(h, p.wk)
    v = ad.matmul(h, p.wv)
    scale = 1.0 / math.sqrt(dh)

    if cache is None:
        qh = _split_heads(q, n_heads, _TIME_ORDER)
        kh = _split_heads(k, n_heads, _TIME_ORDER)
        vh = _split_heads(v, n_heads, _TIME_ORDER)
        scores = ad.scale(ad.matmul(qh, ad.swap_last(kh)), scale)
        if causal:
            T = z.shape[-3]
            scores = ad.add(scores, Tensor._wrap(causal_mask(T, z.dtype)))
        o = ad.matmul(ad.softmax(scores, axis=-1), vh)
        o = _merge_heads(o, _TIME_ORDER)
    else:
        if not causal:
            raise UsageError("bidirectional temporal attention cannot stream")
        if z.ndim != 3 or z.shape[0] != 1:
            raise UsageError(f"streaming expects exactly one frame [1, hw, d], got {z.shape}")
        hw = z.shape[1]
        if not cache.matches(hw, n_heads, dh, z.dtype):
            raise StateError("KV cache layout does not match the model configuration")
        cache.write(t, k.data.reshape(hw, n_heads, dh), v.data.reshape(hw, n_heads, dh))
        kc, vc = cache.view(t + 1)
        qh = _split_heads(q, n_heads, _TIME_ORDER)  # [hw, H, 1, dh]
        kt = Tensor.__new__(Tensor)
        kt.data, kt.requires_grad = kc.swapaxes(-1, -2), False
        vt = Tensor.__new__(Tensor)
        vt.data, vt.requires_grad = vc, False
        scores = ad.scale(ad.matmul(qh, kt), scale)
        o = ad.matmul(ad.softmax(scores, axis=-1), vt)
        o = _merge_heads(o, _TIME_ORDER)

    o = ad.matmul(o, p.wo)
    return ad.add(z, ad.mul(ad.tanh(p.gate), o))


def causal_temporal_attention(z, p, n_heads, cache=None, t=0):
    return temporal_attention(z, p, n_heads, causal=True, cache=cache, t=t)


def bidirectional_temporal_attention(z, p, n_heads, cache=None):
    if cache is not None:
        raise UsageError("bidirectional temporal attention is batch-only")
    return temporal_attention(z, p, n_heads, causal=False)


def spatial_attention_lora(x: Tensor, p: SpatialParams, n_heads: int) -> Tensor:
    """Per-frame self-attention over tokens with LoRA deltas on Q, K and V."""
    d = x.shape[-1]
    for a, b in ((p.qa, p.qb), (p.ka, p.kb), (p.va, p.vb)):
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != d or b.shape[1] != d or a.shape[1] != b.shape[0]:
            raise ShapeError(f"LoRA factors {a.shape} / {b.shape} do not compose to {d}x{d}")
    h = ad.layer_norm(x, p.ln_g, p.ln_b)
    q = ad.add(ad.matmul(h, p.wq), ad.matmul(ad.matmul(h, p.qa), p.qb))
    k = ad.add(ad.matmul(h, p.wk), ad.matmul(ad.matmul(h, p.ka), p.kb))
    v = ad.add(ad.matmul(h, p.wv), ad.matmul(ad.matmul(h, p.va), p.vb))
    qh = _split_heads(q, n_heads, _SPACE_ORDER)
    kh = _split_heads(k, n_heads, _SPACE_ORDER)
    vh = _split_heads(v, n_heads, _SPACE_ORDER)
    scores = ad.scale(ad.matmul(qh, ad.swap_last(kh)), 1.0 / math.sqrt(d // n_heads))
    o = ad.matmul(ad.softmax(scores, axis=-1), vh)
    o = ad.matmul(_merge_heads(o, _SPACE_ORDER), p.wo)
    return ad.add(x, o)


def mlp(x: Tensor, p: FFNParams) -> Tensor:
    """Residual pre-norm two-layer GELU MLP."""
    h = ad.layer_norm(x, p.ln_g, p.ln_b)
    h = ad.gelu(ad.add(ad.matmul(h, p.w1), p.b1))
    return ad.add(x, ad.add(ad.matmul(h, p.w2), p.b2))


ffn = mlp


# ---------------------------------------------------------------------------
# initialisation


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def _normal(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def _init_ffn(rng, d: int, hidden: int, dtype) -> FFNParams:
    return FFNParams(
        ln_g=Parameter(np.ones(d, dtype)),
        ln_b=Parameter(np.zeros(d, dtype)),
        w1=Parameter(_xavier(rng, d, hidden, dtype)),
        b1=Parameter(np.zeros(hidden, dtype)),
        w2=Parameter(_xavier(rng, hidden, d, dtype)),
        b2=Parameter(np.zeros(d, dtype)),
    )


# ---------------------------------------------------------------------------
# the encoder


class Backbone:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        d, r, hw = cfg.d_model, cfg.lora_rank, cfg.n_tokens

        self.patch_w = Parameter(_xavier(rng, cfg.patch_dim, d, dt))
        self.patch_b = Parameter(np.zeros(d, dt))
        self.pos_spatial = Parameter(_normal(rng, (hw, d), dt))
        self.pos_temporal = Parameter(_normal(rng, (cfg.max_frames, d), dt))

        self.blocks: list[BlockParams] = []
        for _ in range(cfg.n_layers):
            time = TemporalParams(
                ln_g=Parameter(np.ones(d, dt)),
                ln_b=Parameter(np.zeros(d, dt)),
                wq=Parameter(_normal(rng, (d, d), dt)),
                wk=Parameter(_normal(rng, (d, d), dt)),
                wv=Parameter(_normal(rng, (d, d), dt)),
                wo=Parameter(_normal(rng, (d, d), dt)),
                gate=Parameter(np.zeros((), dt)),
            )
            space = SpatialParams(
                ln_g=Parameter(np.ones(d, dt)),
                ln_b=Parameter(np.zeros(d, dt)),
                wq=Parameter(_xavier(rng, d, d, dt), frozen=True),
                wk=Parameter(_xavier(rng, d, d, dt), frozen=True),
                wv=Parameter(_xavier(rng, d, d, dt), frozen=True),
                wo=Parameter(_xavier(rng, d, d, dt), frozen=True),
                qa=Parameter(_normal(rng, (d, r), dt)),
                qb=Parameter(np.zeros((r, d), dt)),
                ka=Parameter(_normal(rng, (d, r), dt)),
                kb=Parameter(np.zeros((r, d), dt)),
                va=Parameter(_normal(rng, (d, r), dt)),
                vb=Parameter(np.zeros((r, d), dt)),
            )
            self.blocks.append(BlockParams(time, space, _init_ffn(rng, d, cfg.ffn_mult * d, dt)))

        self.pool = PoolParams(
            query=Parameter(_normal(rng, (d, 1), dt)),
            ln_g=Parameter(np.ones(d, dt)),
            ln_b=Parameter(np.zeros(d, dt)),
            wk=Parameter(_xavier(rng, d, d, dt)),
            wv=Parameter(_xavier(rng, d, d, dt)),
            mlp=_init_ffn(rng, d, cfg.ffn_mult * d, dt),
        )
        self.proj_w = Parameter(_xavier(rng, d, cfg.proj_dim, dt))

        for name, p in self.named_parameters():
            p.name = name

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [
            ("patch.w", self.patch_w),
            ("patch.b", self.patch_b),
            ("pos.spatial", self.pos_spatial),
            ("pos.temporal", self.pos_temporal),
        ]
        for i, blk in enumerate(self.blocks):
            out.extend(_walk(f"blocks.{i}", blk))
        out.extend(_walk("pool", self.pool))
        out.append(("proj.w", self.proj_w))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def with_mode(self, mode: str) -> "Backbone":
        """A view of this backbone sharing every parameter but using ``mode``."""
        clone = object.__new__(Backbone)
        clone.__dict__.update(self.__dict__)
        clone.config = self.config.replace(temporal_mode=mode)
        return clone

    # -- encoder ------------------------------------------------------------

    def patchify(self, frames, start: int = 0) -> Tensor:
        """``[..., T, H, W, 3]`` pixels -> ``[..., T, hw, d]`` tokens with position terms.

        ``start`` is the absolute index of the first frame (used when streaming).
        """
        cfg = self.config
        frames = np.asarray(frames.frames if isinstance(frames, VideoClip) else frames)
        if frames.ndim < 4 or frames.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
            raise InputError(
                f"expected frames [..., T, {cfg.image_size}, {cfg.image_size}, 3], got {frames.shape}"
            )
        T = frames.shape[-4]
        if start + T > cfg.max_frames:
            raise CapacityError(f"{start + T} frames exceed max_frames {cfg.max_frames}")
        lead = frames.shape[:-4]
        g, ps = cfg.grid, cfg.patch_size
        x = frames.reshape(lead + (T, g, ps, g, ps, 3))
        n = len(lead)
        x = x.transpose(tuple(range(n)) + tuple(n + i for i in (0, 1, 3, 2, 4, 5)))
        x = np.ascontiguousarray(x, dtype=cfg.np_dtype).reshape(lead + (T, g * g, cfg.patch_dim))
        tok = ad.add(ad.matmul(Tensor._wrap(x), self.patch_w), self.patch_b)
        tok = ad.add(tok, self.pos_spatial)
        trow = ad.reshape(ad.slice_axis(self.pos_temporal, 0, start, start + T), (T, 1, cfg.d_model))
        return ad.add(tok, trow)

    def block_forward(
        self, z: Tensor, layer: int, mode: str | None = None, cache: LayerCache | None = None, t: int = 0
    ) -> Tensor:
        mode = mode or self.config.temporal_mode
        blk = self.blocks[layer]
        heads = self.config.n_heads
        if mode == "causal":
            z = causal_temporal_attention(z, blk.time, heads, cache=cache, t=t)
        elif mode == "bidirectional":
            z = bidirectional_temporal_attention(z, blk.time, heads, cache=cache)
        elif mode != "none":
            raise UsageError(f"unknown temporal mode {mode!r}")
        z = spatial_attention_lora(z, blk.space, heads)
        return ffn(z, blk.ffn)

    def forward(self, frames, mode: str | None = None) -> Tensor:
        """Batch forward: frames ``[..., T, H, W, 3]`` -> hidden ``[..., T, hw, d]``."""
        z = self.patchify(frames)
        for layer in range(self.config.n_layers):
            z = self.block_forward(z, layer, mode)
        return z

    # -- heads --------------------------------------------------------------

    def attention_pool(self, hidden: Tensor) -> Tensor:
        """One learned query per frame attending over that frame's tokens."""
        p = self.pool
        h = ad.layer_norm(hidden, p.ln_g, p.ln_b)
        k = ad.matmul(h, p.wk)
        v = ad.matmul(h, p.wv)
        s = ad.scale(ad.matmul(k, p.query), 1.0 / math.sqrt(hidden.shape[-1]))
        a = ad.softmax(s, axis=-2)  # over tokens
        o = ad.matmul(ad.swap_last(a), v)
        o = ad.reshape(o, o.shape[:-2] + (o.shape[-1],))
        return mlp(o, p.mlp)

    def project(self, x: Tensor) -> Tensor:
        return ad.l2_normalize(ad.matmul(x, self.proj_w))

    def temporal_features(self, hidden: Tensor) -> Tensor:
        """``f``: ``[..., T, d']``."""
        return self.project(self.attention_pool(hidden))

    def spatial_features(self, hidden: Tensor) -> Tensor:
        """``F``: ``[..., T, h, w, d']``."""
        g = self.config.grid
        F = self.project(hidden)
        return ad.reshape(F, F.shape[:-2] + (g, g, F.shape[-1]))

    @staticmethod
    def global_feature(f: Tensor) -> Tensor:
        """``v``: the last row of ``f``."""
        T = f.shape[-2]
        last = ad.slice_axis(f, -2, T - 1, T)
        return ad.reshape(last, f.shape[:-2] + (f.shape[-1],))

    def forward_clip(self, clip, mode: str | None = None) -> tuple[Tensor, FrameFeatures]:
        if not isinstance(clip, VideoClip):
            clip = VideoClip(np.asarray(clip))
        hidden = self.forward(clip.frames, mode)
        f = self.temporal_features(hidden)
        return hidden, FrameFeatures(v=self.global_feature(f), f=f, F=self.spatial_features(hidden))

    # -- streaming ----------------------------------------------------------

    def stream_open(self) -> StreamSession:
        if self.config.temporal_mode == "bidirectional":
            raise UsageError("a bidirectional backbone cannot stream")
        return StreamSession(self)

    def stream_step(self, session: StreamSession, frame) -> FrameFeatures:
        if session.closed:
            raise StateError("stream session is closed")
        if session.backbone is not self and session.config != self.config:
            raise StateError("session belongs to a differently configured model")
        if ad.current_tape() is not None:
            raise UsageError("streaming is inference-only; leave the tape scope first")
        t = session.t_so_far
        if t >= self.config.max_frames:
            raise CapacityError(f"session already holds max_frames={self.config.max_frames} frames")
        frame = np.asarray(frame)
        z = self.patchify(frame[None], start=t)
        mode = self.config.temporal_mode
        for layer in range(self.config.n_layers):
            cache = session.caches[layer] if mode == "causal" else None
            z = self.block_forward(z, layer, mode, cache=cache, t=t)
        f = self.temporal_features(z)
        F = self.spatial_features(z)
        session.t_so_far = t + 1
        return FrameFeatures(v=ad.reshape(f, (f.shape[-1],)), f=f, F=F)

    def stream_close(self, session: StreamSession) -> None:
        if session.closed:
            raise StateError("stream session already closed")
        session.closed = True
        session.caches = []
