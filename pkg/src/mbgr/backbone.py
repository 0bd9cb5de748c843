"""Pre-norm causal transformer over encoded interaction representations."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from . import diffcore as dc


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide d_model={d_model}")
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        # a key bias shifts every score of a query equally, which softmax cancels
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        # x: (U, L, d); allowed: (U, L, L) bool, query row i may read key column j
        U, L, d = x.shape
        dh = d // self.n_heads
        q, k, v = (lin(x).view(U, L, self.n_heads, dh).transpose(1, 2) for lin in (self.q, self.k, self.v))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1)  # masked entries are exactly 0
        y = (attn @ v).transpose(1, 2).reshape(U, L, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.fc2(dc.silu(self.fc1(self.ln2(x))))


class Backbone(nn.Module):
    def __init__(self, d_model: int = 64, n_layers: int = 2, n_heads: int = 2, max_len: int = 64):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.max_len = max_len
        self.pos = nn.Parameter(torch.zeros(max_len, d_model))
        self.blocks = nn.ModuleList(Block(d_model, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)

    @staticmethod
    def attention_mask(valid: torch.Tensor) -> torch.Tensor:
        L = valid.shape[1]
        causal = torch.ones(L, L, dtype=torch.bool, device=valid.device).tril()
        allowed = causal[None] & valid[:, None, :]
        # padded queries read only themselves so softmax stays finite; their output is zeroed
        return allowed | torch.eye(L, dtype=torch.bool, device=valid.device)[None]

    def forward(self, reps: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """reps: (U, L, d) item representations; valid: (U, L) bool. Returns (U, L, d)."""
        L = reps.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={self.max_len}; truncate upstream")
        allowed = self.attention_mask(valid)
        x = reps + self.pos[:L]
        for block in self.blocks:
            x = block(x, allowed)
        x = self.ln_f(x)
        return x * valid[..., None].to(x.dtype)
