"""Training objective: business-weighted, time-decayed InfoNCE plus reconstruction."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch

from . import diffcore as dc
from .ldr import MASK

SECONDS_PER_DAY = 86400.0

# business weights reported for A, B, C, D
EMPIRICAL_WEIGHTS = (0.9, 1.5, 1.3, 1.0)


@dataclass
class LossConfig:
    tau: float = 0.07
    lam: float = 0.1
    alpha: float = 0.05
    business_weights: list[float] | None = None  # None -> all ones
    weight_mode: str = "as-given"
    time_unit: float = SECONDS_PER_DAY

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lam and alpha must be non-negative")
        if self.time_unit <= 0:
            raise ValueError("time_unit must be positive")
        if self.weight_mode not in ("as-given", "sum-to-B"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.business_weights is not None:
            normalize_business_weights(self.business_weights, "as-given")

    def weights(self, n_business: int) -> list[float]:
        w = self.business_weights or [1.0] * n_business
        if len(w) != n_business:
            raise ValueError(f"{len(w)} business weights for {n_business} businesses")
        return normalize_business_weights(list(w), self.weight_mode)

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_business_weights(w, mode: str = "as-given"):
    """``as-given`` returns the weights; ``sum-to-B`` rescales them to sum to the business count."""
    items = dict(w) if isinstance(w, Mapping) else dict(enumerate(w))
    for k, v in items.items():
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"business weight for {k!r} must be positive, got {v}")
    if mode == "sum-to-B":
        scale = len(items) / sum(items.values())
        items = {k: v * scale for k, v in items.items()}
    elif mode != "as-given":
        raise ValueError(f"unknown weight mode {mode!r}")
    return items if isinstance(w, Mapping) else [items[i] for i in range(len(items))]


def inverse_frequency_weights(proportions) -> list[float]:
    inv = [1.0 / p for p in proportions]
    return normalize_business_weights(inv, "sum-to-B")


def time_decay(t_last, t_target, alpha: float, unit: float = SECONDS_PER_DAY):
    """exp(-alpha * (t_last - t_target) / unit); works on floats and tensors."""
    if isinstance(t_last, torch.Tensor) or isinstance(t_target, torch.Tensor):
        delta = (t_last - t_target) / unit
        if (delta < 0).any():
            raise ValueError("target timestamp is after the last event")
        return torch.exp(-alpha * delta)
    delta = (t_last - t_target) / unit
    if delta < 0:
        raise ValueError(f"target timestamp {t_target} is after the last event {t_last}")
    return math.exp(-alpha * delta)


@dataclass
class PairBatch:
    """Supervised (position, business) pairs gathered from a batch."""

    pred: torch.Tensor  # (P, K, d_t) predicted token embeddings
    tokens: torch.Tensor  # (P, K) target SID tokens
    business: torch.Tensor  # (P,)
    w_t: torch.Tensor  # (P,)


def gather_pairs(targets: torch.Tensor, sids: torch.Tensor, timestamps: torch.Tensor, t_last: torch.Tensor,
                 cfg: LossConfig):
    """Index supervised entries of a (U, L, B) routed-target array.

    Returns (u, l, b) index tensors plus target tokens and time-decay weights,
    in row-major order so reductions are reproducible.
    """
    u, l, b = torch.nonzero(targets != MASK, as_tuple=True)
    tgt = targets[u, l, b]
    tokens = sids[u, tgt]
    w_t = time_decay(t_last[u].double(), timestamps[u, tgt].double(), cfg.alpha, cfg.time_unit)
    return (u, l, b), tokens, w_t


def level_logits(pred: torch.Tensor, tables: torch.Tensor, tau: float) -> torch.Tensor:
    """cosine(pred_k, vocab_k)/tau for each level: (P, K, d), (K, V, d) -> (P, K, V)."""
    pn = pred.norm(dim=-1, keepdim=True)
    tn = tables.norm(dim=-1, keepdim=True)
    if (pn == 0).any():
        raise ZeroDivisionError("zero-norm predicted token embedding")
    if (tn == 0).any():
        raise ZeroDivisionError("zero-norm vocabulary embedding")
    return torch.einsum("pkd,kvd->pkv", pred / pn, tables / tn) / tau


def infonce_pairs(pairs: PairBatch, tables: torch.Tensor, cfg: LossConfig, n_business: int):
    """Per-business InfoNCE components and supervised-pair counts."""
    w_b = cfg.weights(n_business)
    if len(pairs.tokens) == 0:
        zero = tables.sum() * 0.0
        return [zero] * n_business, [0] * n_business
    logp = dc.log_softmax(level_logits(pairs.pred, tables, cfg.tau))
    nll = -logp.gather(-1, pairs.tokens.unsqueeze(-1)).squeeze(-1)  # (P, K)
    per_pair = nll.sum(-1) * pairs.w_t.to(nll.dtype)
    comps, counts = [], []
    for b in range(n_business):
        sel = pairs.business == b
        n = int(sel.sum())
        counts.append(n)
        comps.append(w_b[b] * per_pair[sel].mean() if n else per_pair.sum() * 0.0)
    return comps, counts


def infonce(pred: torch.Tensor, targets: torch.Tensor, sids: torch.Tensor, timestamps: torch.Tensor,
            t_last: torch.Tensor, tables: torch.Tensor, cfg: LossConfig):
    """Dense form: ``pred`` is (U, L, B, K, d_t); MASK entries of ``targets`` are never read."""
    n_business = targets.shape[-1]
    (u, l, b), tokens, w_t = gather_pairs(targets, sids, timestamps, t_last, cfg)
    pairs = PairBatch(pred[u, l, b], tokens, b, w_t)
    return infonce_pairs(pairs, tables, cfg, n_business)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    infonce: list[torch.Tensor]
    recon: torch.Tensor
    counts: list[int] = field(default_factory=list)

    def as_floats(self) -> dict:
        out = {"total": self.total.item(), "recon": self.recon.item()}
        for b, v in enumerate(self.infonce):
            out[f"infonce_{b}"] = v.item()
        return out


def total_loss(infonce_components, recon: torch.Tensor, cfg: LossConfig, counts=None) -> LossBreakdown:
    nce = infonce_components[0]
    for c in infonce_components[1:]:
        nce = nce + c
    total = nce + cfg.lam * recon if cfg.lam else nce
    return LossBreakdown(total, list(infonce_components), recon, list(counts or []))
