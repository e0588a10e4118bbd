"""Cross-attention fusion of retrieved memory values and its offline training.

The module owns three matrices (query, key and value projections). Everything
else, backbone included, is frozen while they are trained.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import SequenceEncoder, TrainingLog
from .errors import ArtifactError, TrainingDivergedError
from .fileio import atomic_write_bytes, digest_arrays, pack_container, read_container
from .memory import MemoryIndex, approx_retrieve_topk, retrieve_topk_batch

logger = logging.getLogger(__name__)

PROJECTION_MAGIC = b"READPRJ\x00"
PROJECTION_VERSION = 1
KL_FLOOR = 1e-8
MIX = 0.5  # fixed weight of the query in the combined representation


@dataclass
class ProjectionParams:
    w_q: np.ndarray  # (d, d')
    w_k: np.ndarray  # (d, d')
    w_v: np.ndarray  # (d, d)

    def __post_init__(self) -> None:
        d, dp = self.w_q.shape
        if self.w_k.shape != (d, dp) or self.w_v.shape != (d, d):
            raise ValueError(f"inconsistent projection shapes {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}")
        for w in (self.w_q, self.w_k, self.w_v):
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite projection weight")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, dim: int, proj_dim: int | None = None, seed: int = 0, std: float = 0.02) -> "ProjectionParams":
        proj_dim = proj_dim or dim
        rng = np.random.default_rng(seed)
        draw = lambda *shape: (std * rng.standard_normal(shape)).astype(np.float32)
        return cls(draw(dim, proj_dim), draw(dim, proj_dim), draw(dim, dim))

    @classmethod
    def identity(cls, dim: int) -> "ProjectionParams":
        eye = np.eye(dim)
        return cls(eye.copy(), eye.copy(), eye.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}

    def digest(self) -> str:
        return digest_arrays(self.arrays())


@dataclass
class AttentionOutput:
    e_aug: np.ndarray
    weights: np.ndarray


def masked_softmax(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def fuse_retrieved(params: ProjectionParams, query: np.ndarray, retrieved: np.ndarray,
                   mask: np.ndarray | None = None) -> AttentionOutput:
    """Scaled dot-product attention of the query over K retrieved value embeddings.

    Shapes: query (d,) with retrieved (K, d), or batched (B, d) with (B, K, d).
    ``mask`` marks real rows when a batch holds fewer than K neighbours.
    """
    query = np.asarray(query, dtype=np.float64)
    retrieved = np.asarray(retrieved, dtype=np.float64)
    if retrieved.ndim < 2 or retrieved.shape[-2] == 0:
        raise ValueError("fuse_retrieved needs K >= 1 retrieved embeddings")
    if query.shape[-1] != params.dim or retrieved.shape[-1] != params.dim:
        raise ValueError(f"dimension mismatch: query {query.shape}, retrieved {retrieved.shape}, params d={params.dim}")
    q = query @ params.w_q
    k = retrieved @ params.w_k
    v = retrieved @ params.w_v
    scores = np.einsum("...p,...kp->...k", q, k) / math.sqrt(params.dim)
    weights = masked_softmax(scores, mask)
    return AttentionOutput(np.einsum("...k,...kd->...d", weights, v), weights)


def cosine_fuse(similarities: np.ndarray, retrieved: np.ndarray, mask: np.ndarray | None = None) -> AttentionOutput:
    """Parameter-free variant: softmax over raw cosine similarities, values unprojected."""
    weights = masked_softmax(similarities, mask)
    retrieved = np.asarray(retrieved, dtype=np.float64)
    return AttentionOutput(np.einsum("...k,...kd->...d", weights, retrieved), weights)


def combined_representation(query: np.ndarray, e_aug: np.ndarray) -> np.ndarray:
    query, e_aug = np.asarray(query), np.asarray(e_aug)
    if query.shape != e_aug.shape:
        raise ValueError(f"shape mismatch {query.shape} vs {e_aug.shape}")
    return MIX * query + (1 - MIX) * e_aug


def _nll(h: np.ndarray, target_id: int, table: np.ndarray) -> float:
    h = np.asarray(h, dtype=np.float64)
    if not 0 <= target_id < len(table):
        raise ValueError(f"target {target_id} outside catalog of {len(table)}")
    logits = np.asarray(table, dtype=np.float64) @ h
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[target_id])


def retrieval_rec_loss(h_combined: np.ndarray, target_id: int, table: np.ndarray) -> float:
    return _nll(h_combined, target_id, table)


def item_utility(e_k: np.ndarray, target_id: int, table: np.ndarray) -> float:
    """How poorly a single retrieved embedding predicts the target on its own (lower is better)."""
    return _nll(e_k, target_id, table)


def reference_distribution(utilities: np.ndarray) -> np.ndarray:
    return masked_softmax(-np.asarray(utilities, dtype=np.float64))


def alignment_loss(p_aug: np.ndarray, p_ref: np.ndarray) -> float:
    """KL(p_aug || p_ref), both floored at KL_FLOOR before the log."""
    p_aug = np.asarray(p_aug, dtype=np.float64)
    p_ref = np.asarray(p_ref, dtype=np.float64)
    if p_aug.shape != p_ref.shape:
        raise ValueError(f"length mismatch {p_aug.shape} vs {p_ref.shape}")
    return float(np.sum(p_aug * (np.log(np.maximum(p_aug, KL_FLOOR)) - np.log(np.maximum(p_ref, KL_FLOOR)))))


class CrossAttentionFusion(nn.Module):
    """Trainable counterpart of :func:`fuse_retrieved`."""

    def __init__(self, params: ProjectionParams, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.w_q = nn.Parameter(torch.tensor(params.w_q, dtype=dtype))
        self.w_k = nn.Parameter(torch.tensor(params.w_k, dtype=dtype))
        self.w_v = nn.Parameter(torch.tensor(params.w_v, dtype=dtype))

    def forward(self, query: torch.Tensor, retrieved: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q = query @ self.w_q
        k = retrieved @ self.w_k
        v = retrieved @ self.w_v
        scores = torch.einsum("bp,bkp->bk", q, k) / math.sqrt(self.w_q.shape[0])
        weights = torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)
        return torch.einsum("bk,bkd->bd", weights, v), weights

    def to_params(self) -> ProjectionParams:
        grab = lambda p: p.detach().cpu().numpy().astype(np.float32)
        return ProjectionParams(grab(self.w_q), grab(self.w_k), grab(self.w_v))


def reference_targets(retrieved: torch.Tensor, mask: torch.Tensor, targets: torch.Tensor,
                      table: torch.Tensor) -> torch.Tensor:
    """Reference distribution per example: softmax of negated per-neighbour target NLL."""
    logits = retrieved @ table.T  # (B, K, V)
    nll = torch.logsumexp(logits, dim=-1) - logits.gather(-1, targets[:, None, None].expand(-1, logits.shape[1], 1))[..., 0]
    return torch.softmax((-nll).masked_fill(~mask, float("-inf")), dim=-1)


def retrieval_losses(module: CrossAttentionFusion, query: torch.Tensor, retrieved: torch.Tensor, mask: torch.Tensor,
                     targets: torch.Tensor, table: torch.Tensor, p_ref: torch.Tensor,
                     lam: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-mean (total, rec, align) losses."""
    e_aug, weights = module(query, retrieved, mask)
    h = MIX * query + (1 - MIX) * e_aug
    rec = F.cross_entropy(h @ table.T, targets)
    kl = weights * (torch.log(weights.clamp_min(KL_FLOOR)) - torch.log(p_ref.clamp_min(KL_FLOOR)))
    align = kl.masked_fill(~mask, 0.0).sum(-1).mean()
    return rec + lam * align, rec, align


@dataclass
class RetrievalTrainConfig:
    k: int = 10
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    patience: int = 10
    seed: int = 0
    proj_dim: int | None = None

    def __post_init__(self) -> None:
        if self.k < 1 or self.lam < 0 or self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid retrieval training config {self}")


def gather_neighbours(index: MemoryIndex, queries: np.ndarray, k: int,
                      exclude_users: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Retrieve and stack neighbour values: (entries, sims, values (B, K, d), mask (B, K))."""
    entries, sims = retrieve_topk_batch(index, queries, k, exclude_users)
    return _stack(index, entries, sims)


def gather_neighbours_approx(index: MemoryIndex, queries: np.ndarray, k: int, nprobe: int,
                             exclude_users: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    queries = np.atleast_2d(queries)
    width = min(k, len(index))
    entries = np.full((len(queries), width), -1, dtype=np.int64)
    sims = np.full((len(queries), width), np.nan)
    for row, q in enumerate(queries):
        res = approx_retrieve_topk(index, q, k, None if exclude_users is None else int(exclude_users[row]), nprobe)
        entries[row, : len(res)] = res.entries
        sims[row, : len(res)] = res.similarities
    return _stack(index, entries, sims)


def _stack(index: MemoryIndex, entries: np.ndarray, sims: np.ndarray):
    mask = entries >= 0
    values = index.values[np.where(mask, entries, 0)] * mask[..., None]
    return entries, sims, values, mask


def train_retrieval_module(model: SequenceEncoder, index: MemoryIndex, config: RetrievalTrainConfig,
                           validate=None) -> tuple[ProjectionParams, TrainingLog]:
    """Fit the three projections on the memory's own (prefix, target) pairs.

    Each memory entry is a training example whose own user is excluded from
    retrieval. ``validate`` maps ProjectionParams to a score (higher is
    better) used for checkpoint selection and early stopping; without it
    the final epoch is kept.
    """
    digest = model.digest()
    if index.checkpoint_digest != digest:
        raise ArtifactError(f"memory built from backbone {index.checkpoint_digest[:12]}, got {digest[:12]}")
    model.requires_grad_(False)
    table = model.item_embeddings.weight.detach().clone()
    _, _, values, mask = gather_neighbours(index, index.keys, config.k, index.user_ids)
    query_t = torch.from_numpy(index.keys.copy())
    values_t = torch.from_numpy(values.astype(np.float32))
    mask_t = torch.from_numpy(mask)
    targets_t = torch.from_numpy(index.target_ids.copy())
    with torch.no_grad():
        p_ref = torch.cat([reference_targets(values_t[s : s + 256], mask_t[s : s + 256], targets_t[s : s + 256], table)
                           for s in range(0, len(targets_t), 256)])

    params = ProjectionParams.init(index.dim, config.proj_dim, seed=config.seed)
    module = CrossAttentionFusion(params)
    log = TrainingLog()
    if config.epochs == 0:
        return params, log
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(module.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    best = copy.deepcopy(module.state_dict())
    stale = 0
    n = len(targets_t)
    for epoch in range(1, config.epochs + 1):
        order = torch.from_numpy(rng.permutation(n))
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            b = order[start : start + config.batch_size]
            total, rec, align = retrieval_losses(module, query_t[b], values_t[b], mask_t[b], targets_t[b], table,
                                                 p_ref[b], config.lam)
            if not torch.isfinite(total):
                raise TrainingDivergedError(f"retrieval loss became {total.item()} at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([total.item(), rec.item(), align.item()]) * len(b)
        total, rec, align = (float(x) for x in sums / n)
        record = {"epoch": epoch, "loss": total, "rec_loss": rec, "align_loss": align, "lambda": config.lam}
        if validate is not None:
            score = validate(module.to_params())
            record.update(score if isinstance(score, dict) else {"ND@10": score})
            value = record["ND@10"]
            if value > log.best_value:
                log.best_value, log.best_epoch = value, epoch
                best = copy.deepcopy(module.state_dict())
                stale = 0
            else:
                stale += 1
        log.records.append(record)
        logger.info("retrieval epoch %d %s", epoch, record)
        if validate is not None and stale >= config.patience:
            break
    if validate is not None:
        module.load_state_dict(best)
    if model.digest() != digest:
        raise RuntimeError("backbone parameters changed during retrieval training")
    return module.to_params(), log


def save_projections(params: ProjectionParams, path: str | Path, backbone_digest: str, index_digest: str,
                     extra: dict | None = None) -> str:
    header = {
        "format_version": PROJECTION_VERSION,
        "dim": params.dim,
        "proj_dim": params.proj_dim,
        "backbone_digest": backbone_digest,
        "index_digest": index_digest,
        "digest": params.digest(),
        "extra": extra or {},
    }
    atomic_write_bytes(path, pack_container(PROJECTION_MAGIC, header, params.arrays()))
    return header["digest"]


def load_projections(path: str | Path, backbone_digest: str | None = None,
                     index_digest: str | None = None) -> tuple[ProjectionParams, dict]:
    header, arrays = read_container(path, PROJECTION_MAGIC, "projection checkpoint")
    if header.get("format_version") != PROJECTION_VERSION:
        raise ArtifactError(f"projection checkpoint version {header.get('format_version')} unsupported")
    if backbone_digest is not None and header["backbone_digest"] != backbone_digest:
        raise ArtifactError("projection checkpoint was trained against a different backbone; rerun train-retrieval")
    if index_digest is not None and header["index_digest"] != index_digest:
        raise ArtifactError("projection checkpoint was trained against a different memory; rerun train-retrieval")
    params = ProjectionParams(arrays["w_q"], arrays["w_k"], arrays["w_v"])
    if params.digest() != header["digest"]:
        raise ArtifactError("projection checkpoint digest does not match its tensors")
    return params, header
