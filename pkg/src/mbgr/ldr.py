"""Label dynamic routing: dense per-business next-item targets.

For every position t and business k the target is the nearest later
position whose event belongs to k; MASK (-1) when there is none.
"""
from __future__ import annotations

import numpy as np

MASK = -1


def route_labels(businesses, n_business: int, mode: str = "ldr") -> np.ndarray:
    """Return an (L, n_business) int array of target positions, MASK where unsupervised.

    ``mode="ntp"`` keeps a single target per position: the immediate successor,
    filed under the successor's business.
    """
    b = np.asarray(businesses, dtype=np.int64)
    L = len(b)
    if L and (b.min() < 0 or b.max() >= n_business):
        raise ValueError(f"business ids must lie in [0, {n_business})")
    out = np.full((L, n_business), MASK, dtype=np.int64)
    if mode == "ntp":
        if L > 1:
            out[np.arange(L - 1), b[1:]] = np.arange(1, L)
        return out
    if mode != "ldr":
        raise ValueError(f"unknown routing mode {mode!r}")
    nxt = np.full(n_business, MASK, dtype=np.int64)
    for t in range(L - 1, -1, -1):
        out[t] = nxt
        nxt[b[t]] = t
    return out


def route_batch(businesses: np.ndarray, valid: np.ndarray, n_business: int, mode: str = "ldr") -> np.ndarray:
    """Route each row of a left-padded (U, L) batch; padded positions are all MASK."""
    U, L = businesses.shape
    out = np.full((U, L, n_business), MASK, dtype=np.int64)
    for u in range(U):
        start = L - int(valid[u].sum())
        routed = route_labels(businesses[u, start:], n_business, mode)
        routed[routed != MASK] += start
        out[u, start:] = routed
    return out
