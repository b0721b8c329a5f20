"""Synthetic linear ranking problems with a known ground-truth weight vector."""

from __future__ import annotations

import numpy as np

from faceqe.fiqa import RankPair

MIN_GAP = 0.25  # pairs closer than this in true quality are too near-tied to score


def linear_problem(seed: int, n: int = 100, dim: int = 5, noise: float = 1e-3, n_train: int = 70):
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(dim)
    w_true /= np.linalg.norm(w_true)
    x = rng.standard_normal((n, dim))
    q = x @ w_true + noise * rng.standard_normal(n)
    ids = [f"p{i:03d}" for i in range(n)]
    feats = {i: x[k] for k, i in enumerate(ids)}
    quality = {i: float(q[k]) for k, i in enumerate(ids)}
    return ids[:n_train], ids[n_train:], feats, quality, w_true


def pairs_by_gap(ids, quality, gap: float = MIN_GAP) -> list[RankPair]:
    """Every ordered pair whose quality difference exceeds ``gap``."""
    return [RankPair(a, b) for a in ids for b in ids if quality[a] - quality[b] > gap]
