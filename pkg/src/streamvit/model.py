"""Video encoder, text tower and sigmoid head bundled as one trainable model."""

from __future__ import annotations

from .autodiff import Parameter
from .backbone import Backbone
from .config import ModelConfig
from .data import caption_vocabulary
from .losses import SigmoidHead
from .text import TextEncoder, Vocabulary


def default_vocabulary() -> Vocabulary:
    return Vocabulary.from_corpus(caption_vocabulary())


class StreamModel:
    def __init__(
        self,
        config: ModelConfig | None = None,
        vocab: Vocabulary | None = None,
        seed: int = 0,
        freeze_text: bool = False,
    ):
        self.config = config or ModelConfig()
        dtype = self.config.np_dtype
        self.backbone = Backbone(self.config, seed=seed)
        self.text = TextEncoder(
            vocab or default_vocabulary(),
            self.config.d_model,
            self.config.proj_dim,
            seed=seed + 1,
            dtype=dtype,
            frozen=freeze_text,
        )
        self.head = SigmoidHead(dtype=dtype)
        for name, p in self.named_parameters():
            p.name = name

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [(f"visual.{n}", p) for n, p in self.backbone.named_parameters()]
        out += [(f"text.{n}", p) for n, p in self.text.named_parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]
