"""Modality signature: one-hot modality label -> small FFN -> signature token,
prepended to the text tokens and mixed by one residual self-attention layer.

Also holds the modality registry and the text encoder stand-in (a learned
embedding table over a fixed prompt vocabulary).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .affm import AttnParams, attention
from .tensor import ParamGroup, Tensor, uniform_param


class ModalityRegistry:
    """Ordered set of modality names with dense 0-based indices."""

    def __init__(self, names: Iterable[str]):
        self.names: list[str] = list(names)
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate modality names in {self.names}")
        if not self.names:
            raise ValueError("modality registry is empty")
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, ModalityRegistry) and self.names == other.names

    def __repr__(self) -> str:
        return f"ModalityRegistry({self.names})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unregistered modality {name!r}; registry has {self.names}") from None


DEFAULT_REGISTRY = ("CFP", "OCT")


def encode_modality(modality: str, registry: ModalityRegistry) -> np.ndarray:
    """One-hot label vector of length ``len(registry)``."""
    v = np.zeros(len(registry))
    v[registry.index(modality)] = 1.0
    return v


@dataclass
class ModalityFfnParams(ParamGroup):
    w1: Tensor  # (D_hidden, D_label)
    b1: Tensor
    w2: Tensor  # (D_sig, D_hidden)
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_label: int, d_sig: int, d_hidden: int = 16):
        return cls(
            w1=uniform_param(rng, (d_hidden, d_label), d_label),
            b1=uniform_param(rng, (d_hidden,), d_label),
            w2=uniform_param(rng, (d_sig, d_hidden), d_hidden),
            b2=uniform_param(rng, (d_sig,), d_hidden),
        )


def signature(label, p: ModalityFfnParams) -> Tensor:
    """W2 relu(W1 x + b1) + b2 for a label vector (D_label,) or batch (N, D_label)."""
    x = T.as_tensor(label)
    if x.shape[-1] != p.w1.shape[1]:
        raise ValueError(f"label has {x.shape[-1]} entries, FFN expects {p.w1.shape[1]}")
    h = T.relu(T.matmul(x.reshape(-1, x.shape[-1]), T.transpose(p.w1)) + p.b1)
    out = T.matmul(h, T.transpose(p.w2)) + p.b2
    return out.reshape(p.w2.shape[0]) if x.ndim == 1 else out


def inject_and_contextualize(sig, text_tokens, attn: AttnParams) -> Tensor:
    """Prepend the signature to the text tokens and self-attend (residual).

    ``sig`` is (d,), ``text_tokens`` is (L, d) with L >= 0; returns (L+1, d).
    Row 0 is the contextualized signature position.
    """
    sig, text_tokens = T.as_tensor(sig), T.as_tensor(text_tokens)
    d = text_tokens.shape[-1]
    if sig.shape[-1] != d:
        raise ValueError(f"signature width {sig.shape[-1]} differs from text width {d}")
    seq = T.concat_seq(sig.reshape(1, d), text_tokens) if text_tokens.shape[0] else sig.reshape(1, d)
    x = seq.reshape(1, seq.shape[0], d)
    out = x + attention(x, x, attn)
    return out.reshape(seq.shape[0], d)


# ---------------------------------------------------------------------------
# text encoder stand-in
# ---------------------------------------------------------------------------

VOCAB = ("<unk>", "lesion", "scar", "retinal", "fluid", "region", "segment", "the", "a", "all",
         "in", "of", "image", "spot", "band", "bright", "dark")


def tokenize(prompt: str, vocab: Sequence[str] = VOCAB) -> list[int]:
    lookup = {w: i for i, w in enumerate(vocab)}
    return [lookup.get(w, 0) for w in prompt.lower().split()]


@dataclass
class TextEncoderParams(ParamGroup):
    embedding: Tensor  # (V, d_text)

    @classmethod
    def init(cls, rng: np.random.Generator, d_text: int, vocab_size: int = len(VOCAB)):
        e = rng.uniform(-1.0, 1.0, size=(vocab_size, d_text))
        e -= e.mean(axis=0, keepdims=True)  # zero-mean over the vocabulary
        return cls(embedding=Tensor(e, requires_grad=True))


def encode_text(prompt: str, p: TextEncoderParams) -> Tensor:
    """(L, d_text) token features; an empty prompt gives L = 0."""
    ids = tokenize(prompt)
    if not ids:
        return Tensor(np.zeros((0, p.embedding.shape[1])))
    return p.embedding[np.array(ids)]


@dataclass
class ModalitySignatureParams(ParamGroup):
    ffn: ModalityFfnParams
    attn: AttnParams

    @classmethod
    def init(cls, rng: np.random.Generator, d_label: int, d_text: int, d_hidden: int = 16,
             heads: int = 1):
        return cls(ffn=ModalityFfnParams.init(rng, d_label, d_text, d_hidden),
                   attn=AttnParams.init(rng, d_text, d_text, heads))


def modality_text_features(prompt: str, modality: str, registry: ModalityRegistry,
                           text: TextEncoderParams, ms: ModalitySignatureParams | None) -> Tensor:
    """F_ST' for one prompt, or raw F_T when ``ms`` is None."""
    f_t = encode_text(prompt, text)
    if ms is None:
        return f_t
    f_s = signature(encode_modality(modality, registry), ms.ffn)
    return inject_and_contextualize(f_s, f_t, ms.attn)
