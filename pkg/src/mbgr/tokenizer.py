"""Residual k-means tokenizer: item feature vectors -> semantic IDs."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Codebook:
    codewords: np.ndarray  # (levels, vocab, dim)

    def __post_init__(self):
        cw = np.asarray(self.codewords, dtype=np.float64)
        if cw.ndim != 3:
            raise ValueError(f"codewords must be (levels, vocab, dim), got shape {cw.shape}")
        if cw.shape[0] < 1 or cw.shape[1] < 2:
            raise ValueError("codebook needs at least 1 level and 2 codewords per level")
        if not np.isfinite(cw).all():
            raise ValueError("codewords must be finite")
        cw.setflags(write=False)
        object.__setattr__(self, "codewords", cw)

    @property
    def levels(self) -> int:
        return self.codewords.shape[0]

    @property
    def vocab(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]

    def to_json(self) -> dict:
        return {
            "levels": self.levels,
            "vocab": self.vocab,
            "dim": self.dim,
            "codewords": self.codewords.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Codebook":
        cb = cls(np.asarray(doc["codewords"], dtype=np.float64))
        if (cb.levels, cb.vocab, cb.dim) != (doc["levels"], doc["vocab"], doc["dim"]):
            raise ValueError("codebook header does not match codeword array")
        return cb

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_json(json.loads(Path(path).read_text()))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact differences rather than the |x|^2 - 2xc + |c|^2 expansion, so ties stay ties
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        s = d2.sum()
        idx = rng.choice(len(x), p=d2 / s) if s > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, n_init: int = 4, max_iter: int = 100):
    """Lloyd's algorithm, best of ``n_init`` k-means++ starts.

    An empty cluster is re-seeded at the point farthest from its assigned
    centroid (lowest index on ties). Returns (centroids, labels, inertia).
    """
    best = None
    for _ in range(n_init):
        c = _kmeanspp(x, k, rng)
        labels = None
        for _ in range(max_iter):
            d = _sq_dists(x, c)
            new = d.argmin(1)
            for j in range(k):
                if not (new == j).any():
                    far = int(np.argmax(d[np.arange(len(x)), new]))
                    c[j] = x[far]
                    d = _sq_dists(x, c)
                    new = d.argmin(1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = x[labels == j]
                if len(members):
                    c[j] = members.mean(0)
        d = _sq_dists(x, c)
        labels = d.argmin(1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        if best is None or inertia < best[2]:
            best = (c.copy(), labels, inertia)
    return best


def fit_residual_quantizer(item_vectors, levels: int, vocab: int, seed: int = 0, n_init: int = 4) -> Codebook:
    x = np.asarray(item_vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("item_vectors must be a 2-D array")
    if len(x) < vocab:
        raise ValueError(f"need at least vocab={vocab} vectors, got {len(x)}")
    if not np.isfinite(x).all():
        raise ValueError("item_vectors must be finite")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    books = []
    for _ in range(levels):
        c, labels, _ = kmeans(residual, vocab, rng, n_init=n_init)
        books.append(c)
        residual = residual - c[labels]
    return Codebook(np.stack(books))


def assign_sids(vectors, cb: Codebook) -> np.ndarray:
    """Greedy residual assignment for a batch; (n, dim) -> (n, levels) int array."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != cb.dim:
        raise ValueError(f"vector dimension {v.shape[-1]} does not match codebook dim {cb.dim}")
    residual = v.copy()
    out = np.empty((len(v), cb.levels), dtype=np.int64)
    for level in range(cb.levels):
        c = cb.codewords[level]
        idx = _sq_dists(residual, c).argmin(1)  # argmin returns the first minimum
        out[:, level] = idx
        residual = residual - c[idx]
    return out


def assign_sid(item_vector, cb: Codebook) -> tuple[int, ...]:
    v = np.asarray(item_vector, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("assign_sid takes a single vector")
    return tuple(int(t) for t in assign_sids(v[None], cb)[0])


def reconstruct_vector(sid, cb: Codebook) -> np.ndarray:
    sid = list(sid)
    if len(sid) != cb.levels:
        raise ValueError(f"SID length {len(sid)} != codebook levels {cb.levels}")
    out = np.zeros(cb.dim)
    for level, tok in enumerate(sid):
        if not 0 <= tok < cb.vocab:
            raise IndexError(f"token {tok} at level {level} outside [0, {cb.vocab})")
        out += cb.codewords[level, tok]
    return out


def read_item_vectors(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a JSON Lines item-feature file; returns (item_ids, vectors)."""
    ids, vecs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(int(rec["item"]))
                vecs.append([float(v) for v in rec["vec"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed item record ({exc})") from None
    return np.asarray(ids, dtype=np.int64), np.asarray(vecs, dtype=np.float64)
