"""Toy text tower: prompt templates, hashed vocabulary, mean-pooled embeddings."""

from __future__ import annotations

import re
import zlib
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import InputError

N_BUCKETS = 2**14
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Task(str, Enum):
    AR = "ar"
    VTR = "vtr"
    TAL = "tal"
    TVG = "tvg"
    VOS = "vos"
    RVOS = "rvos"


TASK_ORDER: tuple[Task, ...] = (Task.AR, Task.VTR, Task.TAL, Task.TVG, Task.VOS, Task.RVOS)

# project-local templates for closed-set labels; free-form tasks pass through
TEMPLATES = {
    Task.AR: "a video clip of {}.",
    Task.TAL: "a video clip of {}.",
    Task.VOS: "a photo of a {}.",
}


def apply_template(label: str, task: Task | str) -> str:
    if not label or not label.strip():
        raise InputError("label must be non-empty")
    template = TEMPLATES.get(Task(task))
    return label if template is None else template.format(label)


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Known tokens get dense ids; unseen tokens fall into CRC32 hash buckets."""

    def __init__(self, tokens: Iterable[str] = (), n_buckets: int = N_BUCKETS):
        self.n_buckets = n_buckets
        self.tokens: list[str] = []
        self._index: dict[str, int] = {}
        for tok in tokens:
            for piece in tokenize(tok):
                if piece not in self._index:
                    self._index[piece] = len(self.tokens)
                    self.tokens.append(piece)

    @classmethod
    def from_corpus(cls, texts: Iterable[str], n_buckets: int = N_BUCKETS) -> "Vocabulary":
        return cls(sorted({t for text in texts for t in tokenize(text)}), n_buckets)

    def __len__(self) -> int:
        return len(self.tokens) + self.n_buckets

    def token_id(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is not None:
            return idx
        return len(self.tokens) + zlib.crc32(token.encode("utf-8")) % self.n_buckets

    def ids(self, text: str) -> list[int]:
        return [self.token_id(t) for t in tokenize(text)]


class TextEncoder:
    """ids -> embedding rows -> mean -> linear -> L2 normalise.

    Trained jointly with the video encoder; ``frozen=True`` excludes it from
    optimisation.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        d_model: int,
        proj_dim: int,
        seed: int = 0,
        dtype=np.float32,
        frozen: bool = False,
    ):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.embedding = Parameter(
            (rng.standard_normal((len(vocab), d_model)) * 0.02).astype(dtype), name="text.embedding", frozen=frozen
        )
        bound = np.sqrt(6.0 / (d_model + proj_dim))
        self.proj_w = Parameter(
            rng.uniform(-bound, bound, (d_model, proj_dim)).astype(dtype), name="text.proj.w", frozen=frozen
        )

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [("embedding", self.embedding), ("proj.w", self.proj_w)]

    def parameters(self) -> list[Parameter]:
        return [self.embedding, self.proj_w]

    def encode(self, texts: Sequence[str]) -> Tensor:
        """Embed a batch of strings as ``[N, d']``."""
        if isinstance(texts, str):
            raise InputError("encode expects a sequence of strings; use encode_text for one")
        id_lists = [self.vocab.ids(t) for t in texts]
        for text, ids in zip(texts, id_lists):
            if not ids:
                raise InputError(f"text {text!r} has no tokens")
        flat = np.concatenate([np.asarray(i, dtype=np.int64) for i in id_lists])
        # mean pooling as a constant averaging matrix keeps the batch ragged-free
        avg = np.zeros((len(texts), flat.size), dtype=self.embedding.dtype)
        start = 0
        for row, ids in enumerate(id_lists):
            avg[row, start : start + len(ids)] = 1.0 / len(ids)
            start += len(ids)
        rows = ad.gather(self.embedding, flat)
        pooled = ad.matmul(Tensor._wrap(avg), rows)
        return ad.l2_normalize(ad.matmul(pooled, self.proj_w))

    def encode_text(self, text: str) -> Tensor:
        """Embed one string as ``[d']``."""
        out = self.encode([text])
        return ad.reshape(out, (out.shape[-1],))
