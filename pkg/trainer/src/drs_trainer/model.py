"""Tiny decoder-only autoregressive model over a byte vocabulary.

Two pre-norm transformer blocks at small width, double precision by default
so finite-difference gradient checks resolve at 1e-4 relative error.  The
model emits one next-byte distribution per target position: position t of
the logits predicts target byte t given bytes < t (a BOS token shifts the
input right by one).
"""

from __future__ import annotations

import math

import torch
from torch import nn

BYTE_VOCAB = 256
BOS_ID = 256
VOCAB_SIZE = BYTE_VOCAB + 1


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        assert dim % n_heads == 0
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq, dim = x.shape
        qkv = self.qkv(x).reshape(batch, seq, 3, self.n_heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(batch, seq, dim)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyByteLM(nn.Module):
    def __init__(
        self,
        dim: int = 32,
        n_heads: int = 2,
        n_layers: int = 2,
        max_len: int = 512,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.max_len = max_len
        self.tok_emb = nn.Embedding(VOCAB_SIZE, dim)
        self.pos_emb = nn.Embedding(max_len, dim)
        self.blocks = nn.ModuleList(Block(dim, n_heads) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, VOCAB_SIZE, bias=False)
        self.to(dtype)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens [B, T] -> logits [B, T, vocab]."""
        if tokens.shape[1] > self.max_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {self.max_len}")
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(positions)[None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))


def shift_inputs(target_bytes: torch.Tensor) -> torch.Tensor:
    """[B, T] target bytes -> [B, T] decoder inputs: BOS then bytes[:-1]."""
    bos = torch.full_like(target_bytes[:, :1], BOS_ID)
    return torch.cat([bos, target_bytes[:, :-1]], dim=1)
