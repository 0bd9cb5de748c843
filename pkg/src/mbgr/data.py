"""Synthetic multi-business interaction data, persistence, holdout split and batching.

Each user carries one latent preference vector per business that random-walks
through item-feature space; higher drift means faster-changing tastes. An
event first draws a business (global proportions mixed with a per-user
bias), then an item from that business's catalog by softmax affinity to the
current preference.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

DEFAULT_PROPORTIONS = (0.6147, 0.0956, 0.1231, 0.1666)
BUSINESS_NAMES = ("A", "B", "C", "D")
DAY = 86400


@dataclass
class SyntheticConfig:
    n_users: int = 2000
    catalog_sizes: list[int] = field(default_factory=lambda: [738, 115, 148, 199])
    proportions: list[float] = field(default_factory=lambda: list(DEFAULT_PROPORTIONS))
    drift: list[float] = field(default_factory=lambda: [0.02, 0.15, 0.10, 0.05])
    mean_len: float = 40.0
    min_len: int = 8
    correlation: float = 0.3  # shared component of a user's per-business preferences
    user_bias: float = 0.3  # weight of the per-user business mixture vs global proportions
    feature_dim: int = 16
    separation: float = 2.0  # distance scale between business cluster centres
    pref_spread: float = 1.0
    sharpness: float = 1.0  # item choice logits = -sharpness * squared distance
    mean_gap_days: float = 1.0
    start_time: int = 1_700_000_000
    seed: int = 0

    def __post_init__(self):
        B = len(self.proportions)
        if B < 1:
            raise ValueError("need at least one business")
        if any(not 0 < p <= 1 for p in self.proportions) or abs(sum(self.proportions) - 1) > 1e-9:
            raise ValueError("proportions must lie in (0, 1] and sum to 1")
        if len(self.catalog_sizes) != B or len(self.drift) != B:
            raise ValueError("catalog_sizes, drift and proportions must have one entry per business")
        if self.n_users < 1 or any(c < 1 for c in self.catalog_sizes) or self.min_len < 1:
            raise ValueError("counts must be positive")
        if self.mean_len < self.min_len:
            raise ValueError("mean_len must be >= min_len")
        if any(d < 0 for d in self.drift):
            raise ValueError("drift rates must be non-negative")

    @property
    def n_business(self) -> int:
        return len(self.proportions)

    @property
    def n_items(self) -> int:
        return sum(self.catalog_sizes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Catalog:
    vectors: np.ndarray  # (n_items, feature_dim)
    business: np.ndarray  # (n_items,)

    @property
    def n_items(self) -> int:
        return len(self.business)


@dataclass
class Dataset:
    users: list[int]
    events: list[np.ndarray]  # per user (n, 3) int64 rows: item, business, timestamp
    catalog: Catalog | None = None

    def __len__(self):
        return len(self.users)

    @property
    def n_events(self) -> int:
        return sum(len(e) for e in self.events)


def make_catalog(cfg: SyntheticConfig) -> Catalog:
    rng = np.random.default_rng([cfg.seed, 0])
    centers = rng.normal(size=(cfg.n_business, cfg.feature_dim)) * cfg.separation
    business = np.repeat(np.arange(cfg.n_business), cfg.catalog_sizes)
    vectors = centers[business] + rng.normal(size=(len(business), cfg.feature_dim))
    return Catalog(vectors, business)


def _user_events(cfg: SyntheticConfig, catalog: Catalog, user: int, offsets: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1, user])
    B, d = cfg.n_business, cfg.feature_dim
    p = np.asarray(cfg.proportions)
    n = cfg.min_len + int(rng.poisson(cfg.mean_len - cfg.min_len))

    p_user = (1 - cfg.user_bias) * p + cfg.user_bias * rng.dirichlet(p * 2.0 + 1e-3)
    p_user = p_user / p_user.sum()
    bus = rng.choice(B, size=n, p=p_user)

    gaps = rng.exponential(cfg.mean_gap_days * DAY, size=n).astype(np.int64) + 1
    ts = cfg.start_time + int(rng.integers(0, 30 * DAY)) + np.cumsum(gaps)

    anchors = np.stack([catalog.vectors[offsets[b]:offsets[b + 1]].mean(0) for b in range(B)])
    shared = rng.normal(size=d)
    own = rng.normal(size=(B, d))
    rho = cfg.correlation
    pref0 = anchors + cfg.pref_spread * (rho * shared + np.sqrt(1 - rho ** 2) * own)
    step_sd = np.sqrt(gaps / DAY)[:, None, None] * np.asarray(cfg.drift)[None, :, None]
    walk = np.cumsum(rng.normal(size=(n, B, d)) * step_sd, axis=0)
    prefs = pref0[None] + walk  # (n, B, d)

    items = np.empty(n, dtype=np.int64)
    for b in range(B):
        rows = np.flatnonzero(bus == b)
        if not len(rows):
            continue
        lo, hi = offsets[b], offsets[b + 1]
        x = catalog.vectors[lo:hi]
        d2 = ((prefs[rows, b][:, None, :] - x[None]) ** 2).sum(-1)
        gumbel = rng.gumbel(size=d2.shape)
        items[rows] = lo + np.argmax(-cfg.sharpness * d2 + gumbel, axis=1)
    return np.stack([items, bus, ts], axis=1).astype(np.int64)


def generate_dataset(cfg: SyntheticConfig) -> Dataset:
    """Deterministic given ``cfg.seed``; each user draws from its own (seed, user) stream."""
    catalog = make_catalog(cfg)
    offsets = np.concatenate([[0], np.cumsum(cfg.catalog_sizes)])
    events = [_user_events(cfg, catalog, u, offsets) for u in range(cfg.n_users)]
    return Dataset(list(range(cfg.n_users)), events, catalog)


def business_shares(ds: Dataset, n_business: int) -> np.ndarray:
    counts = np.zeros(n_business)
    for ev in ds.events:
        counts += np.bincount(ev[:, 1], minlength=n_business)
    return counts / counts.sum()


# ---------------------------------------------------------------- persistence

def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for u, ev in zip(ds.users, ds.events):
            fh.write(json.dumps({"user": int(u), "events": ev.tolist()}, separators=(",", ":")) + "\n")


def iter_dataset(path) -> Iterator[tuple[int, np.ndarray]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                user = int(rec["user"])
                ev = np.asarray(rec["events"], dtype=np.int64).reshape(-1, 3)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            if len(ev) > 1 and (np.diff(ev[:, 2]) < 0).any():
                raise ValueError(f"{path}:{lineno}: timestamps decrease")
            yield user, ev


def load_dataset(path, catalog: Catalog | None = None) -> Dataset:
    users, events = [], []
    for u, ev in iter_dataset(path):
        users.append(u)
        events.append(ev)
    return Dataset(users, events, catalog)


def save_catalog(catalog: Catalog, path) -> None:
    with open(path, "w") as fh:
        for i, (vec, b) in enumerate(zip(catalog.vectors, catalog.business)):
            fh.write(json.dumps({"item": i, "vec": vec.tolist(), "business": int(b)}) + "\n")


def load_catalog(path) -> Catalog:
    vecs, bus, ids = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(int(rec["item"]))
                vecs.append([float(v) for v in rec["vec"]])
                bus.append(int(rec.get("business", 0)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed item record ({exc})") from None
    if ids != list(range(len(ids))):
        raise ValueError(f"{path}: item ids must be 0..n-1 in order")
    return Catalog(np.asarray(vecs), np.asarray(bus, dtype=np.int64))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- holdout split

@dataclass
class TestCase:
    user: int
    business: int
    item: int
    timestamp: int


def split(ds: Dataset) -> tuple[Dataset, list[TestCase]]:
    """Hold out, per user and business, the final interaction of that business.

    The remaining events form the training sequence and also the input for the
    user's test cases. Users left with no training events contribute no tests.
    """
    train_users, train_events, tests = [], [], []
    for u, ev in zip(ds.users, ds.events):
        held = []
        for b in np.unique(ev[:, 1]):
            held.append(int(np.flatnonzero(ev[:, 1] == b)[-1]))
        keep = np.ones(len(ev), dtype=bool)
        keep[held] = False
        if not keep.any():
            continue
        train_users.append(u)
        train_events.append(ev[keep])
        for i in sorted(held, key=lambda i: ev[i, 1]):
            tests.append(TestCase(int(u), int(ev[i, 1]), int(ev[i, 0]), int(ev[i, 2])))
    return Dataset(train_users, train_events, ds.catalog), tests


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    items: torch.Tensor  # (U, L) int64, 0 at padding
    business: torch.Tensor  # (U, L) int64, 0 at padding
    timestamps: torch.Tensor  # (U, L) float64 seconds
    valid: torch.Tensor  # (U, L) bool
    sids: torch.Tensor  # (U, L, K) int64

    @property
    def t_last(self) -> torch.Tensor:
        return self.timestamps[:, -1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in (self.items, self.business, self.timestamps, self.valid):
            h.update(t.numpy().tobytes())
        return h.hexdigest()[:16]


def truncate(ev: np.ndarray, max_len: int) -> np.ndarray:
    return ev[-max_len:]


def make_batch(seqs: list[np.ndarray], item_sids: np.ndarray, max_len: int) -> Batch:
    """Left-pad (and truncate to the most recent ``max_len``) a list of event arrays."""
    U = len(seqs)
    L = min(max_len, max(len(s) for s in seqs))
    items = np.zeros((U, L), dtype=np.int64)
    bus = np.zeros((U, L), dtype=np.int64)
    ts = np.zeros((U, L), dtype=np.float64)
    valid = np.zeros((U, L), dtype=bool)
    for u, ev in enumerate(seqs):
        ev = truncate(ev, L)
        n = len(ev)
        items[u, L - n:] = ev[:, 0]
        bus[u, L - n:] = ev[:, 1]
        ts[u, L - n:] = ev[:, 2]
        valid[u, L - n:] = True
    return Batch(
        torch.from_numpy(items),
        torch.from_numpy(bus),
        torch.from_numpy(ts),
        torch.from_numpy(valid),
        torch.from_numpy(np.asarray(item_sids)[items]),
    )
