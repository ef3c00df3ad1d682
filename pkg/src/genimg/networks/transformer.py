"""Decoder-only transformer over codebook tokens."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..foundation import SequenceTooLong, TokenOutOfVocab
from .blocks import attention


class _CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v, self.heads, causal=True))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _CausalSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class DecoderOnlyTransformer(nn.Module):
    """Pre-norm causal transformer with learned positional embeddings.

    Logits at position ``i`` depend only on tokens ``0..i``.
    """

    architecture_id = "decoder_transformer"

    def __init__(self, num_tokens: int = 513, max_seq_len: int = 4096, dim: int = 64, depth: int = 8, heads: int = 8):
        super().__init__()
        self.num_tokens, self.max_seq_len = num_tokens, max_seq_len
        self.config = dict(num_tokens=num_tokens, max_seq_len=max_seq_len, dim=dim, depth=depth, heads=heads)
        self.token_emb = nn.Embedding(num_tokens, dim)
        self.pos_emb = nn.Embedding(max_seq_len, dim)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_tokens)
        nn.init.normal_(self.token_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim == 1:
            tokens = tokens.unsqueeze(0)
        length = tokens.shape[1]
        if length > self.max_seq_len:
            raise SequenceTooLong(f"sequence length {length} > {self.max_seq_len}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.num_tokens):
            raise TokenOutOfVocab(f"tokens must lie in [0, {self.num_tokens})")
        pos = torch.arange(length)
        h = self.token_emb(tokens.long()) + self.pos_emb(pos)[None]
        for block in self.blocks:
            h = block(h)
        return self.head(self.ln_f(h))


def transformer_forward(net: DecoderOnlyTransformer, tokens) -> torch.Tensor:
    return net(tokens)


def sequence_log_likelihood(net: DecoderOnlyTransformer, tokens: torch.Tensor, bos_token: int,
                            num_codes: int) -> torch.Tensor:
    """Per-sequence natural-log likelihood of ``tokens`` (B, L) after a BOS token.

    The softmax is restricted to the ``num_codes`` codebook entries so the
    distribution is normalised over sequences of codebook indices.
    """
    tokens = tokens.long()
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= num_codes):
        raise TokenOutOfVocab(f"codebook tokens must lie in [0, {num_codes})")
    bos = torch.full((tokens.shape[0], 1), bos_token, dtype=torch.long)
    inputs = torch.cat([bos, tokens[:, :-1]], dim=1)
    logits = net(inputs)[..., :num_codes]
    logp = F.log_softmax(logits.double(), dim=-1)
    return logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1).sum(-1)
