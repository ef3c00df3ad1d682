"""Frozen, dependency-free text conditioning.

Words are mapped to fixed Gaussian vectors derived from a hash of the word, so
embeddings are reproducible across processes without a trained text encoder.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(caption: str) -> List[str]:
    return _WORD.findall(caption.lower())


@dataclass(frozen=True)
class HashTextEmbedder:
    """Caption -> ``(max_tokens, dim)`` context; missing rows are zero.

    The empty caption maps to the all-zeros context, which doubles as the null
    conditioning for classifier-free guidance.
    """

    dim: int = 32
    max_tokens: int = 8
    seed: int = 0

    def word_vector(self, word: str) -> np.ndarray:
        key = zlib.crc32(word.encode("utf-8")) ^ (self.seed * 0x9E3779B1 & 0xFFFFFFFF)
        return np.random.default_rng(key).standard_normal(self.dim) / np.sqrt(self.dim)

    def embed_one(self, caption: str) -> np.ndarray:
        out = np.zeros((self.max_tokens, self.dim), dtype=np.float32)
        for i, w in enumerate(tokenize(caption)[: self.max_tokens]):
            out[i] = self.word_vector(w)
        return out

    def embed(self, captions: Sequence[str]) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.embed_one(c) for c in captions]))

    def pooled(self, captions: Sequence[str]) -> np.ndarray:
        """Mean word vector per caption (zeros for empty captions)."""
        rows = []
        for c in captions:
            words = tokenize(c)
            rows.append(np.mean([self.word_vector(w) for w in words], axis=0) if words else np.zeros(self.dim))
        return np.asarray(rows)
