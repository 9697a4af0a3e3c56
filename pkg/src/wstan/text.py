"""Sentence encoding: tokenizer, vocabulary and a bidirectional LSTM."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD = "<pad>"
OOV = "<unk>"

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


class EmptySentenceError(ValueError):
    pass


class VocabularyError(IndexError):
    pass


class Vocabulary:
    """Dense token table.  Index 0 is padding, index 1 out-of-vocabulary."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, OOV]
        self.stoi: dict[str, int] = {PAD: 0, OOV: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, 1)

    @classmethod
    def build(cls, sentences: Iterable[str]) -> "Vocabulary":
        """Vocabulary over all words of ``sentences`` in first-seen order."""
        vocab = cls()
        for s in sentences:
            for w in split_words(s):
                vocab.add(w)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[2:]))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls(line for line in lines)


def split_words(sentence: str) -> list[str]:
    return [w for w in _PUNCT.sub("", sentence.lower()).split() if w]


def tokenize(sentence: str, vocab: Vocabulary) -> list[int]:
    words = split_words(sentence)
    if not words:
        raise EmptySentenceError(f"sentence {sentence!r} has no tokens")
    return [vocab.lookup(w) for w in words]


@dataclass
class EncoderParams:
    """Embedding table plus per-layer, per-direction LSTM weights.

    Gate order inside the stacked ``4H`` rows is input, forget, cell, output.
    """

    embedding: Tensor
    layers: list[dict[str, Tensor]] = field(default_factory=list)

    @property
    def d_s(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden(self) -> int:
        return self.d_s // 2

    def tensors(self) -> dict[str, Tensor]:
        out = {"encoder.embedding": self.embedding}
        for li, layer in enumerate(self.layers):
            for k, t in layer.items():
                out[f"encoder.l{li}.{k}"] = t
        return out

    @classmethod
    def init(cls, vocab_size: int, d_s: int, n_layers: int,
             rng: np.random.Generator) -> "EncoderParams":
        if d_s % 2:
            raise ad.ConfigurationError(f"sentence width d_s must be even, got {d_s}")
        H = d_s // 2
        emb = ad.parameter(rng.uniform(-0.1, 0.1, size=(vocab_size, d_s)))
        bound = 1.0 / np.sqrt(H)
        layers = []
        for li in range(n_layers):
            din = d_s  # layer 0 sees embeddings; later layers see [fwd; bwd]
            layer = {}
            for dr in ("fw", "bw"):
                layer[f"{dr}.w_ih"] = ad.parameter(rng.uniform(-bound, bound, (4 * H, din)))
                layer[f"{dr}.w_hh"] = ad.parameter(rng.uniform(-bound, bound, (4 * H, H)))
                b = np.zeros(4 * H)
                b[H:2 * H] = 1.0  # forget-gate bias
                layer[f"{dr}.b"] = ad.parameter(b)
            layers.append(layer)
        params = cls(emb, layers)
        for name, t in params.tensors().items():
            t.name = name
        return params


def _lstm_pass(xs: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor,
               reverse: bool) -> list[Tensor]:
    """Run one direction over the rows of ``xs``; returns hidden states in input order."""
    T = xs.shape[0]
    H = w_hh.shape[1]
    gx = ad.affine(xs, w_ih, b)  # [T, 4H] all input projections at once
    h = Tensor(np.zeros(H))
    c = Tensor(np.zeros(H))
    hs: list[Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = ad.add(gx[t], ad.affine(h, w_hh))
        ifo = ad.sigmoid(ad.concat([z[:2 * H], z[3 * H:]]))
        g = ad.tanh(z[2 * H:3 * H])
        i, f, o = ifo[:H], ifo[H:2 * H], ifo[2 * H:]
        c = ad.add(ad.hadamard(f, c), ad.hadamard(i, g))
        h = ad.hadamard(o, ad.tanh(c))
        hs[t] = h
    return hs


def encode_sentence(tokens: Sequence[int], params: EncoderParams) -> Tensor:
    """Sentence vector ``[h_fw(last); h_bw(first)]`` of length ``d_s``."""
    if len(tokens) == 0:
        raise EmptySentenceError("cannot encode an empty token list")
    V = params.embedding.shape[0]
    for tok in tokens:
        if not 0 <= tok < V:
            raise VocabularyError(f"token index {tok} outside vocabulary of size {V}")
    rows = [params.embedding[int(tok)] for tok in tokens]
    xs = ad.stack(rows)
    fw_last = bw_first = None
    for li, layer in enumerate(params.layers):
        fw = _lstm_pass(xs, layer["fw.w_ih"], layer["fw.w_hh"], layer["fw.b"], reverse=False)
        bw = _lstm_pass(xs, layer["bw.w_ih"], layer["bw.w_hh"], layer["bw.b"], reverse=True)
        fw_last, bw_first = fw[-1], bw[0]
        if li + 1 < len(params.layers):
            xs = ad.stack([ad.concat([a, b]) for a, b in zip(fw, bw)])
    return ad.concat([fw_last, bw_first])
