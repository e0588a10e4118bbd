"""Seeded synthetic interaction logs for tests, demos and smoke runs."""

from __future__ import annotations

import numpy as np


def markov_log(n_users: int = 200, n_items: int = 60, n_clusters: int = 6, min_len: int = 8, max_len: int = 20,
               shift_prob: float = 0.08, noise: float = 0.1, seed: int = 0) -> list[str]:
    """Tab-separated ``user item timestamp`` lines.

    Items are split into clusters, each with a fixed successor ordering.
    Users walk their current cluster's chain, occasionally jump to another
    cluster (a preference shift) and occasionally pick a random item.
    """
    rng = np.random.default_rng(seed)
    items = rng.permutation(n_items)
    clusters = np.array_split(items, n_clusters)
    lines = []
    stamp = 0
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        c = int(rng.integers(n_clusters))
        pos = int(rng.integers(len(clusters[c])))
        for _ in range(length):
            r = rng.random()
            if r < noise:
                item = int(rng.integers(n_items))
            else:
                if r < noise + shift_prob:
                    c = int(rng.integers(n_clusters))
                    pos = int(rng.integers(len(clusters[c])))
                item = int(clusters[c][pos])
                pos = (pos + 1) % len(clusters[c])
            stamp += int(rng.integers(1, 100))
            lines.append(f"u{u}\ti{item}\t{stamp}")
    return lines


def repeated_sequence_log(n_users: int = 20, sequence: tuple[int, ...] = (1, 2, 3, 4, 5, 6)) -> list[str]:
    """Every user interacts with the same items in the same order."""
    return [f"u{u}\ti{item}\t{t}" for u in range(n_users) for t, item in enumerate(sequence)]
