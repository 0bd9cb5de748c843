"""Model assembly, training loop, checkpoints, evaluation and the ablation matrix."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import diffcore as dc
from .backbone import Backbone
from .bid import BidCodec, MeanPoolCodec, reconstruction_loss
from .data import Batch, Dataset, SyntheticConfig, TestCase, generate_dataset, make_batch, split
from .evaluation import RankingResult, embedding_separation, hit_rate_at_k, rank_batch
from .ldr import route_batch
from .loss import LossBreakdown, LossConfig, PairBatch, gather_pairs, infonce_pairs, total_loss
from .mbp import MultiBusinessAdapter
from .tokenizer import Codebook, assign_sids, fit_residual_quantizer

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-ldr", "no-mbp", "no-bid", "ntp-baseline")
CHECKPOINT_FORMAT = "mbgr-checkpoint/1"


@dataclass
class ModelConfig:
    n_levels: int = 2  # SID length
    vocab: int = 32
    d_t: int = 32
    d_e: int = 64
    d_b: int = 8
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 64
    n_experts: int = 8
    expert_hidden: int = 32
    gate_activation: str = "silu"
    init_std: float = 0.01


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    steps: int = 600
    batch_size: int = 32


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    variant: str = "full"
    seed: int = 0
    eval_k: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        m, o = self.model, self.optim
        for name in ("n_levels", "vocab", "d_t", "d_e", "d_b", "n_layers", "n_heads", "max_len", "n_experts",
                     "expert_hidden"):
            if getattr(m, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        if m.vocab < 2:
            raise ValueError("model.vocab must be >= 2")
        if m.d_e % m.n_heads:
            raise ValueError("model.n_heads must divide model.d_e")
        if o.lr <= 0 or o.batch_size < 1 or o.steps < 0:
            raise ValueError("invalid optimizer settings")
        if self.eval_k < 1:
            raise ValueError("eval_k must be positive")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _build(cls, doc):
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        sub = getattr(defaults, name)
        if is_dataclass(sub) and isinstance(value, dict):
            kwargs[name] = _build(type(sub), value)
        elif isinstance(sub, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def desk_config(**overrides) -> RunConfig:
    """Budgeted setup for the single-CPU experiments: 2x16 SIDs, default data, shorter schedule, wider init."""
    cfg = RunConfig(model=ModelConfig(vocab=16, init_std=0.1), optim=OptimConfig(steps=800))
    return with_overrides(cfg, **overrides) if overrides else cfg


def tiny_config(**overrides) -> RunConfig:
    """Double-precision toy setup for gradient checks: 2 users, 6 events, 2x8 SIDs, 2 experts, d=8."""
    cfg = RunConfig(
        model=ModelConfig(n_levels=2, vocab=8, d_t=8, d_e=8, d_b=4, n_layers=1, n_heads=2, max_len=8,
                          n_experts=2, expert_hidden=8, init_std=0.3),
        loss=LossConfig(tau=0.5, lam=0.1, alpha=0.05),
        optim=OptimConfig(steps=0, batch_size=2),
        data=SyntheticConfig(n_users=2, catalog_sizes=[12, 6, 6, 8], mean_len=6, min_len=6, feature_dim=4),
        dtype="float64",
    )
    return with_overrides(cfg, **overrides) if overrides else cfg


def grad_check_model(cfg: RunConfig | None = None, eps: float = 1e-4, tolerance: float = 1e-4) -> dc.GradientReport:
    """Whole-model finite-difference check of ``MBGR.loss`` on the full (unsplit) sequences."""
    cfg = cfg or tiny_config()
    if cfg.dtype != "float64":
        raise ValueError("grad_check_model needs dtype float64")
    ctx = build_context(cfg)
    model = init_model(cfg, ctx)
    batch = make_batch(ctx.dataset.events, ctx.item_sids, cfg.model.max_len)
    return dc.grad_check(lambda: model.loss(batch, cfg.loss).total, dict(model.named_parameters()),
                         eps=eps, tolerance=tolerance)


# ---------------------------------------------------------------- model


class MBGR(nn.Module):
    """Codec + causal backbone + business adapter, wired per ablation variant."""

    def __init__(self, mcfg: ModelConfig, n_business: int, variant: str = "full"):
        super().__init__()
        self.mcfg, self.n_business, self.variant = mcfg, n_business, variant
        self.business_emb = nn.Embedding(n_business, mcfg.d_b)
        codec_cls = MeanPoolCodec if variant in ("no-bid", "ntp-baseline") else BidCodec
        self.codec = codec_cls(mcfg.n_levels, mcfg.vocab, n_business, mcfg.d_t, mcfg.d_e, mcfg.d_b,
                               business_emb=self.business_emb)
        self.backbone = Backbone(mcfg.d_e, mcfg.n_layers, mcfg.n_heads, mcfg.max_len)
        self.mbp = None
        if variant not in ("no-mbp", "ntp-baseline"):
            self.mbp = MultiBusinessAdapter(self.business_emb, mcfg.d_e, mcfg.n_experts, mcfg.gate_activation,
                                            expert_hidden=mcfg.expert_hidden)
        self.route_mode = "ntp" if variant in ("no-ldr", "ntp-baseline") else "ldr"

    def reset_parameters(self, codebook: Codebook | None = None, generator: torch.Generator | None = None):
        std = self.mcfg.init_std
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".ln" in name or name.startswith("backbone.ln"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.normal_(0.0, std, generator=generator)
            if codebook is not None:
                cw = torch.tensor(np.array(codebook.codewords), dtype=self.codec.token_tables.dtype)
                n = min(cw.shape[-1], self.mcfg.d_t)
                self.codec.token_tables[..., :n] += cw[..., :n]

    @property
    def tables(self) -> torch.Tensor:
        return self.codec.token_tables

    def general(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-position item representations and backbone outputs, both (U, L, d_e)."""
        reps = self.codec.encode(batch.sids, batch.business)
        return reps, self.backbone(reps, batch.valid)

    def predict(self, h: torch.Tensor, business: torch.Tensor) -> torch.Tensor:
        """Predicted token embeddings (..., K, d_t) for general reps ``h`` and target businesses."""
        if self.mbp is None:
            return self.codec.decode(h, None)
        return self.codec.decode(self.mbp(h, business), business)

    def loss(self, batch: Batch, cfg: LossConfig) -> LossBreakdown:
        reps, h = self.general(batch)
        valid = batch.valid
        recon_pred = self.codec.decode(reps[valid], batch.business[valid])
        recon = reconstruction_loss(self.codec.token_embeddings(batch.sids[valid]), recon_pred)

        targets = torch.from_numpy(route_batch(batch.business.numpy(), valid.numpy(), self.n_business,
                                               self.route_mode))
        (u, l, b), tokens, w_t = gather_pairs(targets, batch.sids, batch.timestamps, batch.t_last, cfg)
        pairs = PairBatch(self.predict(h[u, l], b), tokens, b, w_t)
        comps, counts = infonce_pairs(pairs, self.tables, cfg, self.n_business)
        return total_loss(comps, recon, cfg, counts)


# ---------------------------------------------------------------- experiment context


@dataclass
class Context:
    """Everything a run needs besides the model: data, split and tokenization."""

    dataset: Dataset
    train: Dataset
    tests: list[TestCase]
    codebook: Codebook
    item_sids: np.ndarray  # (n_items, K)
    item_business: np.ndarray

    @property
    def n_business(self) -> int:
        return int(self.item_business.max()) + 1


def build_context(cfg: RunConfig, dataset: Dataset | None = None, codebook: Codebook | None = None) -> Context:
    ds = dataset if dataset is not None else generate_dataset(cfg.data)
    if ds.catalog is None:
        raise ValueError("dataset has no item catalog")
    if codebook is None:
        codebook = fit_residual_quantizer(ds.catalog.vectors, cfg.model.n_levels, cfg.model.vocab, seed=cfg.seed)
    if (codebook.levels, codebook.vocab) != (cfg.model.n_levels, cfg.model.vocab):
        raise ValueError("codebook shape does not match model config")
    train, tests = split(ds)
    return Context(ds, train, tests, codebook, assign_sids(ds.catalog.vectors, codebook), ds.catalog.business)


def init_model(cfg: RunConfig, ctx: Context) -> MBGR:
    torch.manual_seed(cfg.seed)
    model = MBGR(cfg.model, ctx.n_business, cfg.variant).to(cfg.torch_dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.reset_parameters(ctx.codebook, gen)
    return model


def batch_for(ctx: Context, users: np.ndarray, cfg: RunConfig) -> Batch:
    return make_batch([ctx.train.events[i] for i in users], ctx.item_sids, cfg.model.max_len)


def _first_nonfinite(model: nn.Module) -> str:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return name
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return f"{name}.grad"
    return "loss"


@dataclass
class TrainResult:
    model: MBGR
    curve: list[dict]
    batch_checksums: list[str]


def train(cfg: RunConfig, ctx: Context, log_every: int = 0) -> TrainResult:
    model = init_model(cfg, ctx)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr, betas=tuple(cfg.optim.betas))
    rng = np.random.default_rng([cfg.seed, 7])
    curve, checksums = [], []
    t0 = time.perf_counter()
    with dc.strict_checks(False):
        _train_loop(cfg, ctx, model, opt, rng, curve, checksums, log_every, t0)
    return TrainResult(model, curve, checksums)


def _train_loop(cfg, ctx, model, opt, rng, curve, checksums, log_every, t0):
    n = len(ctx.train)
    order, cursor = rng.permutation(n), 0
    for step in range(cfg.optim.steps):
        if cursor + cfg.optim.batch_size > n:
            order, cursor = rng.permutation(n), 0
        users = order[cursor:cursor + cfg.optim.batch_size]
        cursor += cfg.optim.batch_size
        batch = batch_for(ctx, users, cfg)
        checksums.append(batch.checksum())

        opt.zero_grad()
        out = model.loss(batch, cfg.loss)
        if not torch.isfinite(out.total):
            raise dc.NonFiniteError(f"loss at step {step} (first non-finite tensor: {_first_nonfinite(model)})")
        out.total.backward()
        opt.step()
        row = {"step": step, **out.as_floats(), "batch": checksums[-1]}
        curve.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d total %.4f recon %.4f (%.1fs)", step, row["total"], row["recon"],
                     time.perf_counter() - t0)


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate(model: MBGR, cfg: RunConfig, ctx: Context, batch_size: int = 256) -> list[RankingResult]:
    model.eval()
    row_of = {u: i for i, u in enumerate(ctx.train.users)}
    tests = [t for t in ctx.tests if t.user in row_of]
    item_sids = torch.from_numpy(ctx.item_sids)
    results = []
    for start in range(0, len(tests), batch_size):
        chunk = tests[start:start + batch_size]
        users = sorted({t.user for t in chunk})
        pos = {u: i for i, u in enumerate(users)}
        batch = batch_for(ctx, np.array([row_of[u] for u in users]), cfg)
        _, h = model.general(batch)
        h_last = h[:, -1]
        idx = torch.tensor([pos[t.user] for t in chunk])
        bus = torch.tensor([t.business for t in chunk])
        pred = model.predict(h_last[idx], bus)
        results += rank_batch(pred, item_sids, model.tables, cfg.loss.tau, cfg.eval_k,
                              [t.item for t in chunk], [t.business for t in chunk])
    model.train()
    return results


@torch.no_grad()
def item_representations(model: MBGR, ctx: Context, mode: str) -> np.ndarray:
    sids = torch.from_numpy(ctx.item_sids)
    bus = torch.from_numpy(ctx.item_business)
    if mode == "bid":
        return model.codec.encode(sids, bus).double().numpy()
    if mode == "sum-pool":
        return model.codec.token_embeddings(sids).mean(-2).double().numpy()
    raise ValueError(f"unknown representation mode {mode!r}")


def metric_rows(results, cfg: RunConfig, n_business: int, run_id: str, names=None) -> list[dict]:
    names = names or [chr(ord("A") + b) for b in range(n_business)]
    hr = hit_rate_at_k(results, cfg.eval_k, n_business)
    metric = f"HR@{cfg.eval_k}"
    rows = [{"run_id": run_id, "variant": cfg.variant, "business": "all", "metric": metric, "value": hr["all"]}]
    rows += [{"run_id": run_id, "variant": cfg.variant, "business": names[b], "metric": metric, "value": hr[b]}
             for b in range(n_business)]
    return rows


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.config_hash()}-s{cfg.seed}"


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: MBGR, cfg: RunConfig, path, codebook: Codebook | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "n_business": model.n_business,
        "state": model.state_dict(),
        "codebook": codebook.to_json() if codebook is not None else None,
    }, path)


def checkpoint_codebook(path) -> Codebook | None:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    return Codebook.from_json(doc["codebook"]) if doc.get("codebook") else None


def load_checkpoint(path) -> tuple[MBGR, RunConfig]:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = RunConfig.from_dict(doc["config"])
    if cfg.config_hash() != doc["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    model = MBGR(cfg.model, doc["n_business"], cfg.variant).to(cfg.torch_dtype)
    model.load_state_dict(doc["state"])
    return model, cfg


# ---------------------------------------------------------------- experiments


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    doc = cfg.to_dict()
    for key, value in changes.items():
        set_dotted(doc, key.replace("__", "."), value)
    return RunConfig.from_dict(doc)


def set_dotted(doc: dict, path: str, value) -> None:
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise KeyError(f"unknown config section {k!r} in {path!r}")
        node = node[k]
    if keys[-1] not in node:
        raise KeyError(f"unknown config key {path!r}")
    node[keys[-1]] = value


def run_once(cfg: RunConfig, ctx: Context) -> tuple[TrainResult, list[RankingResult], list[dict]]:
    res = train(cfg, ctx)
    results = evaluate(res.model, cfg, ctx)
    rows = metric_rows(results, cfg, ctx.n_business, run_id(cfg))
    return res, results, rows


def ablate(cfg: RunConfig, ctx: Context, variants=VARIANTS) -> list[dict]:
    """Train and evaluate each variant on the same data with the same seed."""
    rows = []
    for v in variants:
        vcfg = with_overrides(cfg, variant=v)
        _, _, r = run_once(vcfg, ctx)
        rows += r
    return rows


def separation_scores(model: MBGR, ctx: Context) -> dict[str, float]:
    return {mode: embedding_separation(item_representations(model, ctx, mode), ctx.item_business).silhouette
            for mode in ("bid", "sum-pool")}
