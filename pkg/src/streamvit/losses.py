"""Sigmoid pairwise alignment losses at global, temporal and pixel granularity.

All six losses score visual/text pairs with ``s = visual . text`` and average
``softplus(-y * (tau * s + b))`` over every pair of the task's grid, where
``y = +1`` for aligned pairs and ``-1`` otherwise. Background items are
negatives against every text.
"""

from __future__ import annotations

import math
import warnings
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import InputError, ShapeError

BACKGROUND = -1


class SigmoidHead:
    """Learnable temperature (stored as its log, so it stays positive) and bias."""

    def __init__(self, tau: float = 10.0, bias: float = -10.0, dtype=np.float32):
        self.log_tau = Parameter(np.asarray(math.log(tau), dtype=dtype), name="head.log_tau")
        self.bias = Parameter(np.asarray(bias, dtype=dtype), name="head.bias")

    @property
    def tau(self) -> Tensor:
        return ad.exp(self.log_tau)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [("log_tau", self.log_tau), ("bias", self.bias)]

    def parameters(self) -> list[Parameter]:
        return [self.log_tau, self.bias]


def _labels(y: np.ndarray, like: Tensor) -> Tensor:
    return Tensor._wrap(np.asarray(y, dtype=like.dtype))


def sigmoid_pair_loss(s: Tensor, y, head: SigmoidHead) -> Tensor:
    """Mean over pairs of ``log(1 + exp(-y * (tau * s + b)))``.

    The bias enters with the sign used by SigLIP, so ``b = -10`` at init
    makes every pair start out leaning negative.
    """
    y = np.asarray(y)
    if y.shape != s.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ")
    logits = ad.add(ad.mul(s, head.tau), head.bias)
    return ad.mean(ad.softplus(ad.mul(logits, _labels(-y, s))))


def _pair_scores(x: Tensor, texts: Tensor) -> Tensor:
    """``x [..., d'] . texts [N, d']`` -> ``[..., N]`` through one 2-D matmul.

    Routing every loss through the same flat product makes the collapse
    identities between losses exact, not merely close.
    """
    if texts.ndim != 2 or x.shape[-1] != texts.shape[-1]:
        raise ShapeError(f"feature {x.shape} and text {texts.shape} dimensions differ")
    lead = x.shape[:-1]
    flat = ad.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    s = ad.matmul(flat, ad.swap_last(texts))
    return ad.reshape(s, lead + (texts.shape[0],))


def _check_class_ids(labels: np.ndarray, n_classes: int) -> None:
    bad = (labels != BACKGROUND) & ((labels < 0) | (labels >= n_classes))
    if bad.any():
        raise InputError(f"class ids must lie in [0, {n_classes}) or be background ({BACKGROUND})")


def loss_ar(v: Tensor, class_texts: Tensor, labels, head: SigmoidHead) -> Tensor:
    labels = np.asarray(labels)
    if labels.shape != (v.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match batch {v.shape[0]}")
    C = class_texts.shape[0]
    if ((labels < 0) | (labels >= C)).any():
        raise InputError(f"action labels must lie in [0, {C})")
    s = _pair_scores(v, class_texts)
    y = np.where(labels[:, None] == np.arange(C), 1, -1)
    return sigmoid_pair_loss(s, y, head)


def loss_vtr(v: Tensor, captions: Tensor, head: SigmoidHead) -> Tensor:
    B = v.shape[0]
    if captions.shape[0] != B:
        raise ShapeError(f"{B} videos but {captions.shape[0]} captions")
    if B == 1:
        warnings.warn("video-text batch of one has no negatives", RuntimeWarning, stacklevel=2)
    s = _pair_scores(v, captions)
    return sigmoid_pair_loss(s, 2 * np.eye(B, dtype=np.int64) - 1, head)


def loss_tal(f: Tensor, class_texts: Tensor, frame_labels, head: SigmoidHead) -> Tensor:
    frame_labels = np.asarray(frame_labels)
    if frame_labels.shape != f.shape[:2]:
        raise ShapeError(f"frame labels {frame_labels.shape} vs features {f.shape[:2]}")
    C = class_texts.shape[0]
    _check_class_ids(frame_labels, C)
    s = _pair_scores(f, class_texts)
    y = np.where(frame_labels[..., None] == np.arange(C), 1, -1)
    return sigmoid_pair_loss(s, y, head)


def tvg_labels(intervals, B: int, T: int) -> np.ndarray:
    """``y[b, t, q] = +1`` iff ``q == b`` and ``start_b <= t < end_b``."""
    intervals = np.asarray(intervals, dtype=np.int64).reshape(B, 2)
    t = np.arange(T)
    inside = (t[None, :] >= intervals[:, :1]) & (t[None, :] < intervals[:, 1:])
    y = -np.ones((B, T, B), dtype=np.int64)
    b = np.arange(B)
    y[b, :, b] = np.where(inside, 1, -1)
    return y


def loss_tvg(f: Tensor, queries: Tensor, intervals, head: SigmoidHead) -> Tensor:
    """Intervals are half-open ``[start, end)`` frame spans; empty spans are allowed."""
    B, T = f.shape[:2]
    intervals = np.asarray(intervals)
    if queries.shape[0] != B or intervals.shape != (B, 2):
        raise ShapeError(f"need {B} queries and intervals [{B}, 2], got {queries.shape[0]} and {intervals.shape}")
    if (intervals[:, 0] < 0).any() or (intervals[:, 0] > intervals[:, 1]).any() or (intervals[:, 1] > T).any():
        raise InputError(f"intervals must satisfy 0 <= start <= end <= {T}")
    s = _pair_scores(f, queries)
    return sigmoid_pair_loss(s, tvg_labels(intervals, B, T), head)


@lru_cache(maxsize=64)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D linear interpolation weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - w)
    np.add.at(m, (rows, hi), w)
    m.setflags(write=False)
    return m


def upsample_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """``[H*W, h*w]`` bilinear operator acting on row-major flattened maps."""
    (h, w), (H, W) = src, dst
    return np.kron(_interp_matrix(H, h), _interp_matrix(W, w))


def upsample_logits(patch_logits: Tensor, target: tuple[int, int]) -> Tensor:
    """Bilinear ``[..., h, w, C]`` -> ``[..., H, W, C]`` per channel."""
    h, w, C = patch_logits.shape[-3:]
    H, W = target
    if H < h or W < w:
        raise ShapeError(f"cannot upsample {h}x{w} to the smaller {H}x{W}")
    if (H, W) == (h, w):
        return patch_logits
    lead = patch_logits.shape[:-3]
    op = Tensor._wrap(upsample_matrix((h, w), (H, W)).astype(patch_logits.dtype))
    x = ad.reshape(patch_logits, lead + (h * w, C))
    return ad.reshape(ad.matmul(op, x), lead + (H, W, C))


def _check_masks(F: Tensor, masks: np.ndarray) -> None:
    if masks.ndim != 4 or masks.shape[:2] != F.shape[:2]:
        raise InputError(f"masks {masks.shape} do not match features {F.shape[:2]} as [B, T, H, W]")
    if masks.shape[2] < F.shape[2] or masks.shape[3] < F.shape[3]:
        raise InputError(f"mask resolution {masks.shape[2:]} is below the patch grid {F.shape[2:4]}")


def loss_vos(F: Tensor, class_texts: Tensor, masks, head: SigmoidHead) -> Tensor:
    """``F [B, T, h, w, d']``; ``masks [B, T, H, W]`` of class ids or background."""
    masks = np.asarray(masks)
    _check_masks(F, masks)
    C = class_texts.shape[0]
    _check_class_ids(masks, C)
    logits = upsample_logits(_pair_scores(F, class_texts), masks.shape[2:])
    y = np.where(masks[..., None] == np.arange(C), 1, -1)
    return sigmoid_pair_loss(logits, y, head)


def rvos_labels(masks: np.ndarray) -> np.ndarray:
    """``y[b, t, Y, X, q] = +1`` iff ``q == b`` and the pixel is foreground."""
    B = masks.shape[0]
    y = -np.ones(masks.shape + (B,), dtype=np.int64)
    b = np.arange(B)
    y[b, ..., b] = np.where(masks != 0, 1, -1)
    return y


def loss_rvos(F: Tensor, queries: Tensor, masks, head: SigmoidHead) -> Tensor:
    """Binary ``masks [B, T, H, W]``; each video is referred to by its own query."""
    masks = np.asarray(masks)
    _check_masks(F, masks)
    if queries.shape[0] != F.shape[0]:
        raise ShapeError(f"{F.shape[0]} videos but {queries.shape[0]} queries")
    if not np.isin(masks, (0, 1)).all():
        raise InputError("referring masks must be binary")
    logits = upsample_logits(_pair_scores(F, queries), masks.shape[2:])
    return sigmoid_pair_loss(logits, rvos_labels(masks), head)
