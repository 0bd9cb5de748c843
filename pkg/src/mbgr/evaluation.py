"""Ranking from predicted token embeddings, business-wise HR@K, embedding separation."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.metrics import silhouette_samples

from . import diffcore as dc
from .loss import level_logits


@dataclass
class RankingResult:
    business: int
    truth: int
    items: list[int]  # top-k, best first
    scores: list[float]
    better: int  # candidates scoring strictly above the truth

    def hit(self, k: int) -> bool:
        # the truth's tie block intersects the top-k
        return self.better < k


def item_scores(pred: torch.Tensor, item_sids: torch.Tensor, tables: torch.Tensor, tau: float) -> torch.Tensor:
    """Score every candidate for each prediction.

    pred: (T, K, d_t); item_sids: (N, K). Returns (T, N): the sum over levels of
    the log-softmax (over that level's vocabulary) of cosine/tau at the item's token.
    """
    logp = dc.log_softmax(level_logits(pred, tables, tau))  # (T, K, V)
    K = item_sids.shape[1]
    return sum(logp[:, k, item_sids[:, k]] for k in range(K))


def _rank_row(scores: np.ndarray, item_ids: np.ndarray, truth: int, business: int, k: int) -> RankingResult:
    order = np.lexsort((item_ids, -scores))[:k]
    pos = np.flatnonzero(item_ids == truth)
    better = int((scores > scores[pos[0]]).sum()) if len(pos) else len(scores)
    return RankingResult(business, truth, item_ids[order].tolist(), scores[order].tolist(), better)


def rank_items(pred: torch.Tensor, candidates: dict[int, tuple[int, ...]], tables: torch.Tensor, tau: float, k: int,
               truth: int = -1, business: int = -1) -> RankingResult:
    """Rank ``candidates`` (item id -> SID) for one prediction of shape (K, d_t)."""
    if not candidates:
        raise ValueError("empty candidate set")
    if k < 1 or k > len(candidates):
        raise ValueError(f"k={k} outside [1, {len(candidates)}]")
    ids = np.asarray(sorted(candidates), dtype=np.int64)
    sids = torch.as_tensor([candidates[i] for i in ids], dtype=torch.int64)
    with torch.no_grad():
        scores = item_scores(pred[None], sids, tables, tau)[0].double().numpy()
    return _rank_row(scores, ids, truth, business, k)


def rank_batch(pred: torch.Tensor, item_sids: torch.Tensor, tables: torch.Tensor, tau: float, k: int,
               truths, businesses) -> list[RankingResult]:
    """Full-catalog ranking for T predictions; catalog item ids are 0..N-1."""
    ids = np.arange(item_sids.shape[0])
    with torch.no_grad():
        scores = item_scores(pred, item_sids, tables, tau).double().numpy()
    return [_rank_row(scores[i], ids, int(t), int(b), k) for i, (t, b) in enumerate(zip(truths, businesses))]


def hit_rate_at_k(results: list[RankingResult], k: int, n_business: int | None = None) -> dict:
    """HR@k per business plus ``"all"`` (mean over cases, not over businesses)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("no ranking results")
    hits = np.array([r.hit(k) for r in results], dtype=float)
    bus = np.array([r.business for r in results])
    out = {}
    keys = range(n_business) if n_business else sorted(set(bus.tolist()))
    for b in keys:
        sel = bus == b
        out[b] = float(hits[sel].mean()) if sel.any() else float("nan")
    out["all"] = float(hits.mean())
    return out


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project onto the top-2 principal axes of the covariance (sign fixed by largest loading)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = int((vals > 1e-12 * max(vals[0], 1e-300)).sum())
    n = min(2, rank)
    if n < 2:
        warnings.warn(f"covariance has rank {rank}; using {n} principal component(s)")
    coords = np.zeros((len(x), 2))
    for j in range(n):
        v = vecs[:, j]
        v = v * np.sign(v[np.argmax(np.abs(v))])
        coords[:, j] = xc @ v
    return coords


@dataclass
class Separation:
    coords: np.ndarray  # (n, 2)
    silhouette: float
    per_business: dict[int, float]


def embedding_separation(reps, labels) -> Separation:
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    groups, counts = np.unique(labels, return_counts=True)
    if len(groups) < 2 or counts.min() < 3:
        raise ValueError("need at least 2 businesses with at least 3 points each")
    if np.ptp(reps, axis=0).max() == 0:
        raise ValueError("silhouette undefined: all representations are identical")
    s = silhouette_samples(reps, labels, metric="euclidean")
    per = {int(g): float(s[labels == g].mean()) for g in groups}
    return Separation(pca_2d(reps), float(s.mean()), per)


def write_coords_csv(path, item_ids, labels, coords) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item", "business", "x", "y"])
        for i, b, (x, y) in zip(item_ids, labels, coords):
            w.writerow([int(i), int(b), repr(float(x)), repr(float(y))])


METRIC_COLUMNS = ["run_id", "variant", "business", "metric", "value"]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row[c] if c != "value" else repr(float(row[c])) for c in METRIC_COLUMNS])
