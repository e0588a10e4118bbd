"""Test-time refinement: mix the backbone's prediction with the
retrieval-augmented one, weighted by how confident each distribution is."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import SequenceEncoder, encode_batch, score_items, softmax_over_catalog
from .errors import ArtifactError
from .memory import MemoryIndex
from .metrics import rank_items
from .retrieval import ProjectionParams, cosine_fuse, fuse_retrieved, gather_neighbours, gather_neighbours_approx

EPS = 1e-8
ATTENTION_MODES = ("learned", "cosine")


@dataclass(frozen=True)
class FusionConfig:
    rho: float = 0.01
    eps: float = EPS
    literal_alpha: bool = False
    # w/o-alpha ablation: a fixed mixing weight instead of the entropy gate
    fixed_alpha: float | None = None
    # "cosine" is the w/o-attention ablation (no learned projections)
    attention: str = "learned"

    def __post_init__(self) -> None:
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")
        if self.fixed_alpha is not None and not 0 <= self.fixed_alpha <= 1:
            raise ValueError(f"fixed_alpha must be in [0, 1], got {self.fixed_alpha}")


def augmented_prediction(e_aug: np.ndarray, table: np.ndarray) -> np.ndarray:
    return softmax_over_catalog(score_items(np.asarray(e_aug, dtype=np.float64), np.asarray(table, dtype=np.float64)))


def top_count(n_items: int, rho: float) -> int:
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    # tolerate float noise such as 0.07 * 100 = 7.000000000000001
    return max(1, math.ceil(round(rho * n_items, 9)))


def truncated_entropy(p: np.ndarray, rho: float, eps: float = EPS) -> np.ndarray | float:
    """Entropy terms summed over the ceil(rho * |V|) most probable items only.

    The original probabilities are used as-is, with no renormalisation over
    the kept set. Tied probabilities contribute identical terms, so which of
    them is kept at the cutoff does not change the value.
    """
    p = np.asarray(p, dtype=np.float64)
    m = top_count(p.shape[-1], rho)
    top = -np.partition(-p, m - 1, axis=-1)[..., :m] if m < p.shape[-1] else p
    h = -np.sum(top * np.log(top + eps), axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def fusion_weight(h_init, h_aug, literal: bool = False):
    """Weight on the initial prediction: a two-way softmax over confidences 1 / (1 + H).

    ``literal=True`` evaluates the asymmetric printed variant whose first
    denominator term is exp(1 / H_init).
    """
    h_init = np.asarray(h_init, dtype=np.float64)
    h_aug = np.asarray(h_aug, dtype=np.float64)
    if np.any(h_init < 0) or np.any(h_aug < 0):
        raise ValueError("entropies must be non-negative")
    if np.any(~np.isfinite(h_init)):
        raise ValueError("initial entropy must be finite")
    c_init = 1.0 / (1.0 + h_init)
    c_aug = np.where(np.isinf(h_aug), 0.0, 1.0 / (1.0 + h_aug))
    if literal:
        with np.errstate(divide="ignore", over="ignore"):
            denom = np.exp(1.0 / h_init) + np.exp(c_aug)
        alpha = np.exp(c_init) / denom
    else:
        # difference form avoids overflow and equals the two-way softmax
        alpha = 1.0 / (1.0 + np.exp(c_aug - c_init))
    return float(alpha) if alpha.ndim == 0 else alpha


def fuse_predictions(p_init: np.ndarray, p_aug: np.ndarray, alpha) -> np.ndarray:
    p_init, p_aug = np.asarray(p_init, dtype=np.float64), np.asarray(p_aug, dtype=np.float64)
    if p_init.shape != p_aug.shape:
        raise ValueError(f"length mismatch {p_init.shape} vs {p_aug.shape}")
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if alpha.ndim:
        alpha = alpha[..., None]
    return alpha * p_init + (1.0 - alpha) * p_aug


@dataclass
class AdaptTrace:
    h_top_init: float
    h_top_aug: float
    alpha: float
    entries: list[int]
    target_items: list[int]
    neighbour_users: list[int]
    similarities: list[float]
    weights: list[float]


@dataclass
class AdaptBatch:
    p_init: np.ndarray
    p_aug: np.ndarray
    p_fused: np.ndarray
    h_top_init: np.ndarray
    h_top_aug: np.ndarray
    alpha: np.ndarray
    entries: np.ndarray
    similarities: np.ndarray
    weights: np.ndarray
    mask: np.ndarray = field(repr=False)

    def trace(self, row: int, index: MemoryIndex) -> AdaptTrace:
        keep = self.mask[row]
        ent = self.entries[row][keep]
        return AdaptTrace(float(self.h_top_init[row]), float(self.h_top_aug[row]), float(self.alpha[row]),
                          ent.tolist(), index.target_ids[ent].tolist(), index.user_ids[ent].tolist(),
                          self.similarities[row][keep].tolist(), self.weights[row][keep].tolist())


class Adapter:
    """Frozen backbone + memory + projections, applied to test sequences.

    Pure with respect to its state: any number of sequences can be adapted
    concurrently, and batched results match per-sample calls.
    """

    def __init__(self, model: SequenceEncoder, index: MemoryIndex, projections: ProjectionParams | None,
                 k: int, config: FusionConfig = FusionConfig(), nprobe: int | None = None):
        if index.checkpoint_digest and index.checkpoint_digest != model.digest():
            raise ArtifactError("memory index was built from a different backbone checkpoint")
        if config.attention == "learned" and projections is None:
            raise ArtifactError("learned attention needs projection matrices; run train-retrieval first")
        if projections is not None and projections.dim != index.dim:
            raise ArtifactError(f"projection dim {projections.dim} != memory dim {index.dim}")
        self.model = model
        self.index = index
        self.projections = projections
        self.k = k
        self.config = config
        self.nprobe = nprobe
        self.table = model.table().astype(np.float64)

    def encode(self, windows: Sequence[Sequence[int]]) -> np.ndarray:
        return encode_batch(self.model, windows)

    def neighbours(self, h: np.ndarray):
        if self.nprobe is not None:
            return gather_neighbours_approx(self.index, h, self.k, self.nprobe)
        return gather_neighbours(self.index, h, self.k)

    def adapt_representations(self, h: np.ndarray, projections: ProjectionParams | None = None,
                              neighbours=None) -> AdaptBatch:
        """Run the online stage from precomputed representations (B, d).

        ``neighbours`` may carry a cached :func:`gather_neighbours` result for
        the same queries; retrieval never excludes any user at test time.
        """
        cfg = self.config
        proj = projections if projections is not None else self.projections
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        p_init = softmax_over_catalog(score_items(h, self.table))
        if neighbours is None:
            neighbours = self.neighbours(h)
        entries, sims, values, mask = neighbours
        if cfg.attention == "cosine":
            att = cosine_fuse(np.where(mask, sims, 0.0), values, mask)
        else:
            att = fuse_retrieved(proj, h, values, mask)
        p_aug = augmented_prediction(att.e_aug, self.table)
        h_init = truncated_entropy(p_init, cfg.rho, cfg.eps)
        h_aug = truncated_entropy(p_aug, cfg.rho, cfg.eps)
        if cfg.fixed_alpha is not None:
            alpha = np.full(len(h), cfg.fixed_alpha)
        else:
            alpha = np.atleast_1d(fusion_weight(h_init, h_aug, literal=cfg.literal_alpha))
        fused = fuse_predictions(p_init, p_aug, alpha)
        return AdaptBatch(p_init, p_aug, fused, np.atleast_1d(h_init), np.atleast_1d(h_aug), alpha,
                          entries, sims, att.weights, mask)

    def adapt_batch(self, windows: Sequence[Sequence[int]]) -> AdaptBatch:
        return self.adapt_representations(self.encode(windows))

    def adapt_and_rank(self, window: Sequence[int], top_n: int | None = None) -> tuple[np.ndarray, AdaptTrace]:
        batch = self.adapt_batch([window])
        ranked = rank_items(batch.p_fused[0])
        return (ranked if top_n is None else ranked[:top_n]), batch.trace(0, self.index)
