"""Shared mixture-of-experts adaptation of a general representation to one business."""
from __future__ import annotations

import torch
import torch.nn as nn

from . import diffcore as dc
from .bid import FFN, BidCodec, check_business

GATE_ACTIVATIONS = {
    "silu": dc.silu,
    "softmax": dc.softmax,
    "sigmoid": dc.sigmoid,
}


class ExpertBank(nn.Module):
    """K two-layer experts (linear -> SiLU -> linear) held as stacked weights.

    ``mix(z, g)`` returns sum_k g_k * expert_k(z) with two matmuls instead of K
    separate passes; ``expert(k, z)`` evaluates one expert on its own.
    """

    def __init__(self, n_experts: int, d_in: int, d_out: int, d_hidden: int | None = None):
        super().__init__()
        h = d_hidden or d_out
        self.n_experts, self.d_hidden = n_experts, h
        self.w1 = nn.Parameter(torch.empty(n_experts, d_in, h))
        self.b1 = nn.Parameter(torch.empty(n_experts, h))
        self.w2 = nn.Parameter(torch.empty(n_experts, h, d_out))
        self.b2 = nn.Parameter(torch.empty(n_experts, d_out))
        for p in self.parameters():
            nn.init.normal_(p, 0.0, 0.01)

    def expert(self, k: int, z: torch.Tensor) -> torch.Tensor:
        return dc.silu(z @ self.w1[k] + self.b1[k]) @ self.w2[k] + self.b2[k]

    def mix(self, z: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        K, d_in, h = self.w1.shape
        a = dc.silu(z @ self.w1.permute(1, 0, 2).reshape(d_in, K * h) + self.b1.reshape(-1))
        a = (a.unflatten(-1, (K, h)) * g.unsqueeze(-1)).flatten(-2)
        return a @ self.w2.reshape(K * h, -1) + g @ self.b2


class MultiBusinessAdapter(nn.Module):
    def __init__(self, business_emb: nn.Embedding, d_e: int = 64, n_experts: int = 8,
                 gate_activation: str = "silu", expert_hidden: int | None = None):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        if gate_activation not in GATE_ACTIVATIONS:
            raise ValueError(f"gate_activation must be one of {sorted(GATE_ACTIVATIONS)}")
        self.business_emb = business_emb
        self.n_business, d_b = business_emb.weight.shape
        self.n_experts = n_experts
        self.gate_activation = gate_activation
        self.gate = FFN(d_e + d_b, n_experts)
        self.experts = ExpertBank(n_experts, d_e + d_b, d_e, expert_hidden)

    def gates(self, z: torch.Tensor) -> torch.Tensor:
        # unnormalized under silu: no renormalization across experts
        return GATE_ACTIVATIONS[self.gate_activation](self.gate(z))

    def forward(self, e: torch.Tensor, business: torch.Tensor, with_gate: bool = False):
        check_business(business, self.n_business)
        z = dc.concat([e, self.business_emb(business)])
        g = self.gates(z)  # (..., K_exp)
        e_b = self.experts.mix(z, g)
        return (e_b, g) if with_gate else e_b

    adapt = forward


def predict_tokens(e_general: torch.Tensor, business: torch.Tensor, mbp: MultiBusinessAdapter,
                   bid: BidCodec) -> torch.Tensor:
    return bid.decode(mbp.adapt(e_general, business), business)
