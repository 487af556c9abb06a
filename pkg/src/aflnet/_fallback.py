"""Pure-numpy twins of the compiled kernels.

Results are bit-identical to ``_kernels``: products are accumulated one
inner index at a time in ascending order (elementwise numpy arithmetic is
exact IEEE, so the per-element summation order matches a triple loop).
"""
from __future__ import annotations

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, m = a.shape
    if b.shape[0] != m:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((n, b.shape[1]), dtype=np.float64)
    for k in range(m):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    g, n, m = a.shape
    if b.shape[0] != g or b.shape[1] != m:
        raise ValueError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((g, n, b.shape[2]), dtype=np.float64)
    for k in range(m):
        out += a[:, :, k : k + 1] * b[:, k : k + 1, :]
    return out


def ahc_merges(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = scores.shape[0]
    sim = np.array(scores, dtype=np.float64, copy=True)
    size = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    pairs = np.zeros((max(n - 1, 0), 2), dtype=np.intp)
    sims = np.zeros(max(n - 1, 0), dtype=np.float64)
    for step in range(n - 1):
        live = upper & active[:, None] & active[None, :]
        # argmax returns the first maximum in row-major order: lowest (i, j)
        flat = np.where(live, sim, -np.inf).argmax()
        bi, bj = divmod(int(flat), n)
        best = sim[bi, bj]
        si, sj = size[bi], size[bj]
        others = active.copy()
        others[[bi, bj]] = False
        v = (si * sim[bi, others] + sj * sim[bj, others]) / (si + sj)
        sim[bi, others] = v
        sim[others, bi] = v
        size[bi] = si + sj
        active[bj] = False
        pairs[step] = (bi, bj)
        sims[step] = best
    return pairs, sims
