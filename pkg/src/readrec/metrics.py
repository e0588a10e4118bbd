"""Full-catalog ranking metrics. Ties are always broken by ascending item id."""

from __future__ import annotations

import math

import numpy as np

DEFAULT_CUTOFFS = (5, 10, 20)


def hit_ratio_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    # one relevant item, so the ideal DCG is 1
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target among all columns.

    An item ranks ahead of the target if it scores strictly higher, or scores
    equal and has a smaller id.
    """
    scores = np.atleast_2d(scores)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if scores.shape[0] != targets.shape[0]:
        raise ValueError(f"{scores.shape[0]} score rows for {targets.shape[0]} targets")
    rows = np.arange(scores.shape[0])
    t = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > t) | ((scores == t) & (ids < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def rank_items(scores: np.ndarray) -> np.ndarray:
    """Item ids ordered by descending score, ascending id among ties."""
    return np.argsort(-np.asarray(scores), kind="stable")


def metrics_from_ranks(ranks: np.ndarray, cutoffs=DEFAULT_CUTOFFS) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.int64)
    out: dict[str, float] = {}
    for k in cutoffs:
        out[f"HR@{k}"] = float(np.mean(ranks <= k))
    for k in cutoffs:
        gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
        out[f"ND@{k}"] = float(np.mean(gains))
    return out
