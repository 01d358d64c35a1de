"""Vocabulary, digit-level tokenizer, and the autoregressive answer decoder.

Answers to chart questions are frequently numbers that appear nowhere in the
chart text, so the tokenizer splits every numeric literal into per-character
tokens (digits, sign, decimal point, exponent marker).  Any number is then
representable regardless of the word vocabulary, and detokenization merges
the character run back into one literal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    causal_mask,
    cross_entropy,
    embedding_lookup,
    gelu,
    linear,
    multi_head_attention,
)
from .layers import affine_ln, attention_params

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
NUMERIC_CHARS = tuple("0123456789.+-e")

_NUMERIC_RE = re.compile(r"^[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?$")


class DecodingError(Exception):
    pass


class EmptyTarget(DecodingError):
    pass


class VocabError(DecodingError):
    pass


class Vocab:
    """Dense token-id map: 4 specials, then the numeric characters, then
    sorted word tokens.  Ids are line numbers in the saved file."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabError(f"vocab must start with the specials {SPECIALS}")
        if tuple(tokens[len(SPECIALS) : len(SPECIALS) + len(NUMERIC_CHARS)]) != NUMERIC_CHARS:
            raise VocabError("vocab must carry the numeric character block after the specials")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate token in vocab")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        reserved = set(SPECIALS) | set(NUMERIC_CHARS)
        pool = sorted(
            {w.lower() for text in words for w in str(text).split()} - reserved
        )
        # Numeric literals are covered by the character block, not word slots.
        pool = [w for w in pool if not _NUMERIC_RE.match(w)]
        return cls(list(SPECIALS) + list(NUMERIC_CHARS) + pool)

    def __len__(self) -> int:
        return len(self._tokens)

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def tokenize(self, text: str) -> list[int]:
        """Whitespace split, lowercase; numeric literals go character-wise;
        unknown words fall back to the UNK id."""
        ids: list[int] = []
        for word in text.split():
            word = word.lower()
            if _NUMERIC_RE.match(word):
                ids.extend(self._ids[ch] for ch in word)
            else:
                ids.append(self._ids.get(word, UNK_ID))
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        """Inverse of tokenize for representable text: numeric character runs
        merge with no internal spaces, words are space-separated."""
        numeric = set(NUMERIC_CHARS)
        parts: list[str] = []
        run = ""
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            tok = self._tokens[i]
            if tok in numeric:
                run += tok
            else:
                if run:
                    parts.append(run)
                    run = ""
                parts.append(tok)
        if run:
            parts.append(run)
        return " ".join(parts)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self._tokens) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = f.read().splitlines()
        return cls(tokens)


@dataclass
class DecoderConfig:
    d: int
    heads: int
    layers: int = 2
    max_len: int = 16


class AnswerDecoder:
    """Small causal transformer over answer tokens with cross-attention into
    the terminal data flow of the reasoning network."""

    def __init__(self, vocab: Vocab, config: DecoderConfig, store: ParamStore, prefix: str = "dec"):
        d, v = config.d, len(vocab)
        self.vocab = vocab
        self.config = config
        self.embed = store.normal(f"{prefix}.tok", (v, d))
        self.pos = store.normal(f"{prefix}.pos", (config.max_len + 1, d))
        self.blocks = []
        for i in range(config.layers):
            base = f"{prefix}.l{i}"
            self.blocks.append(
                {
                    "self": attention_params(store, f"{base}.self", d),
                    "ln1_g": store.ones(f"{base}.ln1.g", d),
                    "ln1_b": store.zeros(f"{base}.ln1.b", d),
                    "cross": attention_params(store, f"{base}.cross", d),
                    "ln2_g": store.ones(f"{base}.ln2.g", d),
                    "ln2_b": store.zeros(f"{base}.ln2.b", d),
                    "ff_w1": store.matrix(f"{base}.ff.w1", d, 2 * d),
                    "ff_b1": store.zeros(f"{base}.ff.b1", 2 * d),
                    "ff_w2": store.matrix(f"{base}.ff.w2", 2 * d, d),
                    "ff_b2": store.zeros(f"{base}.ff.b2", d),
                    "ln3_g": store.ones(f"{base}.ln3.g", d),
                    "ln3_b": store.zeros(f"{base}.ln3.b", d),
                }
            )
        self.out_w = store.matrix(f"{prefix}.out.w", d, v)
        self.out_b = store.zeros(f"{prefix}.out.b", v)

    def forward(self, o_end: Tensor, ids: list[int]) -> Tensor:
        """Logits [T×V] for a BOS-prefixed token id sequence."""
        n = len(ids)
        x = add(embedding_lookup(self.embed, ids), embedding_lookup(self.pos, np.arange(n)))
        mask = causal_mask(n)
        h = self.config.heads
        for blk in self.blocks:
            a = multi_head_attention(x, x, blk["self"], h, mask)
            x = affine_ln(add(x, a), blk["ln1_g"], blk["ln1_b"])
            c = multi_head_attention(x, o_end, blk["cross"], h)
            x = affine_ln(add(x, c), blk["ln2_g"], blk["ln2_b"])
            f = linear(gelu(linear(x, blk["ff_w1"], blk["ff_b1"])), blk["ff_w2"], blk["ff_b2"])
            x = affine_ln(add(x, f), blk["ln3_g"], blk["ln3_b"])
        return linear(x, self.out_w, self.out_b)

    def teacher_forced_loss(self, o_end: Tensor, target: str) -> Tensor:
        """Mean token cross-entropy of the target under teacher forcing."""
        tokens = self.vocab.tokenize(target)
        if not tokens:
            raise EmptyTarget(f"target {target!r} tokenizes to nothing")
        tokens = tokens[: self.config.max_len - 1]
        inputs = [BOS_ID] + tokens
        targets = tokens + [EOS_ID]
        logits = self.forward(o_end, inputs)
        return cross_entropy(logits, targets)

    def decode_greedy(self, o_end: Tensor, max_len: int | None = None) -> str:
        """Argmax decoding until EOS or the length cap; deterministic."""
        cap = self.config.max_len if max_len is None else min(max_len, self.config.max_len)
        ids = [BOS_ID]
        out: list[int] = []
        for _ in range(cap):
            logits = self.forward(o_end, ids)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            ids.append(nxt)
        return self.vocab.detokenize(out)
