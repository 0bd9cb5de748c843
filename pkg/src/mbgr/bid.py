"""Business-aware semantic-ID codec.

The encoder turns the K token embeddings of an item plus its business
embedding into a gated item representation; the decoder maps a
representation plus business context back to K token embeddings. The same
decoder instance serves reconstruction and next-item prediction.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from . import diffcore as dc


class FFN(nn.Module):
    """linear -> SiLU -> linear"""

    def __init__(self, d_in: int, d_out: int, d_hidden: int | None = None):
        super().__init__()
        d_hidden = d_hidden or d_out
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(dc.silu(self.fc1(x)))


def check_business(business: torch.Tensor, n_business: int) -> None:
    if business.numel() and (business.min() < 0 or business.max() >= n_business):
        bad = business[(business < 0) | (business >= n_business)][0].item()
        raise KeyError(f"unknown business id {bad} (have {n_business})")


class BidCodec(nn.Module):
    def __init__(self, n_levels: int, vocab: int, n_business: int, d_t: int = 32, d_e: int = 64, d_b: int = 8,
                 business_emb: nn.Embedding | None = None):
        super().__init__()
        self.n_levels, self.vocab, self.d_t, self.d_e, self.d_b = n_levels, vocab, d_t, d_e, d_b
        self.n_business = n_business
        self.token_tables = nn.Parameter(torch.zeros(n_levels, vocab, d_t))
        self.business_emb = business_emb if business_emb is not None else nn.Embedding(n_business, d_b)
        kd = n_levels * d_t
        self.ffn_enc = FFN(kd + d_b, d_e)
        self.gate_enc = FFN(d_e + d_b, d_e)
        self.ffn_dec = FFN(d_e + d_b, kd)
        self.gate_dec = FFN(kd + d_b, kd)

    def token_embeddings(self, sids: torch.Tensor) -> torch.Tensor:
        """(..., K) int -> (..., K, d_t)"""
        if sids.shape[-1] != self.n_levels:
            raise ValueError(f"SID length {sids.shape[-1]} != {self.n_levels}")
        if sids.numel() and (sids.min() < 0 or sids.max() >= self.vocab):
            raise IndexError("SID token outside vocabulary")
        levels = torch.arange(self.n_levels, device=sids.device)
        return self.token_tables[levels, sids]

    def business_vectors(self, business: torch.Tensor | None, like: torch.Tensor) -> torch.Tensor:
        if business is None:  # business-agnostic null context
            return like.new_zeros(*like.shape[:-1], self.d_b)
        check_business(business, self.n_business)
        return self.business_emb(business)

    def encode(self, sids: torch.Tensor, business: torch.Tensor, with_gate: bool = False):
        t = self.token_embeddings(sids).flatten(-2)
        b = self.business_vectors(business, t)
        e_enc = self.ffn_enc(dc.concat([t, b]))
        gate = dc.sigmoid(self.gate_enc(dc.concat([e_enc, b])))
        e = dc.mul(e_enc, gate)
        return (e, gate) if with_gate else e

    def decode(self, e: torch.Tensor, business: torch.Tensor | None, with_gate: bool = False):
        dc.check_finite(e, "decoder input")
        b = self.business_vectors(business, e)
        t_dec = self.ffn_dec(dc.concat([e, b]))
        gate = dc.relu(self.gate_dec(dc.concat([t_dec, b])))
        t_hat = dc.mul(t_dec, gate).unflatten(-1, (self.n_levels, self.d_t))
        return (t_hat, gate) if with_gate else t_hat


class MeanPoolCodec(nn.Module):
    """Ablation codec: mean-pooled token embeddings in, one linear map out, no gates."""

    def __init__(self, n_levels: int, vocab: int, n_business: int, d_t: int = 32, d_e: int = 64, d_b: int = 8,
                 business_emb: nn.Embedding | None = None):
        super().__init__()
        self.n_levels, self.vocab, self.d_t, self.d_e, self.d_b = n_levels, vocab, d_t, d_e, d_b
        self.n_business = n_business
        self.token_tables = nn.Parameter(torch.zeros(n_levels, vocab, d_t))
        self.business_emb = business_emb if business_emb is not None else nn.Embedding(n_business, d_b)
        self.proj = nn.Linear(d_t, d_e)
        self.dec = nn.Linear(d_e, n_levels * d_t)

    token_embeddings = BidCodec.token_embeddings

    def encode(self, sids, business):
        check_business(business, self.n_business)
        return self.proj(self.token_embeddings(sids).mean(-2))

    def decode(self, e, business):
        if business is not None:
            check_business(business, self.n_business)
        return self.dec(e).unflatten(-1, (self.n_levels, self.d_t))


def reconstruction_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """(1/K) sum_k ||t_k - t_hat_k||^2 for (..., K, d_t) inputs, averaged over leading axes."""
    if original.shape != reconstructed.shape:
        raise dc.ShapeError("reconstruction_loss", original=original, reconstructed=reconstructed)
    per_item = ((original - reconstructed) ** 2).sum(-1).mean(-1)
    return per_item.mean() if per_item.dim() else per_item
