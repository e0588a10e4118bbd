"""Collaborative memory: (sequence representation -> next-item embedding) entries
with exact cosine top-k search and an optional k-means cell partition for
approximate search."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LeaveOneOutSplit
from .encoder import SequenceEncoder, encode_batch
from .errors import ArtifactError, DataError
from .fileio import atomic_write_bytes, digest_arrays, pack_container, read_container

logger = logging.getLogger(__name__)

MEMORY_MAGIC = b"READMEM\x00"
MEMORY_VERSION = 1
GRANULARITIES = ("user", "prefix")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector cannot be normalized")
    return x / norms


@dataclass
class Partition:
    centroids: np.ndarray  # (cells, d), unit rows
    assignment: np.ndarray  # (N,) cell id per entry
    lists: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.lists = [np.flatnonzero(self.assignment == c) for c in range(len(self.centroids))]

    @property
    def n_cells(self) -> int:
        return len(self.centroids)


@dataclass
class RetrievalResult:
    entries: np.ndarray  # entry indices into the index, best first
    similarities: np.ndarray
    query_digest: str = ""

    def __len__(self) -> int:
        return len(self.entries)


class MemoryIndex:
    """Immutable after construction; safe for concurrent readers."""

    def __init__(self, keys: np.ndarray, values: np.ndarray, user_ids: np.ndarray, target_ids: np.ndarray,
                 checkpoint_digest: str = "", partition: Partition | None = None):
        keys = np.ascontiguousarray(keys, dtype=np.float32)
        values = np.ascontiguousarray(values, dtype=np.float32)
        if keys.ndim != 2 or keys.shape != values.shape:
            raise ValueError(f"keys {keys.shape} and values {values.shape} must be equal (N, d) matrices")
        if len(keys) == 0:
            raise DataError("memory index has no entries")
        self.keys = keys
        self.values = values
        self.user_ids = np.ascontiguousarray(user_ids, dtype=np.int64)
        self.target_ids = np.ascontiguousarray(target_ids, dtype=np.int64)
        self.unit_keys = _unit_rows(keys)
        self.checkpoint_digest = checkpoint_digest
        self.partition = partition
        for arr in (self.keys, self.values, self.user_ids, self.target_ids, self.unit_keys):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def digest(self) -> str:
        arrays = {"keys": self.keys, "values": self.values, "user_ids": self.user_ids, "target_ids": self.target_ids}
        if self.partition is not None:
            arrays["centroids"] = self.partition.centroids
            arrays["assignment"] = self.partition.assignment
        return digest_arrays(arrays)

    def with_partition(self, n_cells: int, seed: int = 0, n_iter: int = 25) -> "MemoryIndex":
        centroids, assignment = spherical_kmeans(self.unit_keys, n_cells, seed=seed, n_iter=n_iter)
        return MemoryIndex(self.keys, self.values, self.user_ids, self.target_ids, self.checkpoint_digest,
                           Partition(centroids, assignment))


def build_memory(split: LeaveOneOutSplit, model: SequenceEncoder, granularity: str = "user",
                 expected_digest: str | None = None) -> MemoryIndex:
    """One entry per user (last training prefix -> its next item) or, with
    ``granularity="prefix"``, one per prefix of the training region."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    digest = model.digest()
    if expected_digest is not None and expected_digest != digest:
        raise ArtifactError(f"backbone digest {digest[:12]} does not match expected {expected_digest[:12]}")
    windows, users, targets = [], [], []
    skipped = 0
    for u in split.users:
        region = split.train_region(u)
        if len(region) < 2:
            skipped += 1
            continue
        cuts = range(1, len(region)) if granularity == "prefix" else [len(region) - 1]
        for j in cuts:
            windows.append(split.window(region[:j]))
            users.append(u)
            targets.append(region[j])
    if skipped:
        logger.info("memory: skipped %d users whose training region has no prefix-target pair", skipped)
    if not windows:
        raise DataError("no training prefix-target pairs to build memory from")
    keys = encode_batch(model, windows)
    table = model.table()
    targets_arr = np.asarray(targets, dtype=np.int64)
    return MemoryIndex(keys, table[targets_arr], np.asarray(users), targets_arr, digest)


def _select_topk(sims: np.ndarray, user_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest finite sims, ordered by (-sim, user_id, position)."""
    finite = np.flatnonzero(np.isfinite(sims))
    if len(finite) > k:
        kth = np.partition(sims[finite], len(finite) - k)[len(finite) - k]
        finite = finite[sims[finite] >= kth]
    order = np.lexsort((finite, user_ids[finite], -sims[finite]))
    return finite[order[:k]]


def _check_query(index: MemoryIndex, query: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != index.dim:
        raise ValueError(f"query dim {query.shape[-1]} != index dim {index.dim}")
    return _unit_rows(query)


def retrieve_topk_batch(index: MemoryIndex, queries: np.ndarray, k: int,
                        exclude_users: Sequence[int] | np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact cosine top-k for a batch of queries.

    Returns (entries, sims), both (B, K'), K' = min(K, eligible). Rows whose
    eligible set is smaller than K' are padded with -1 / nan.
    """
    q = _check_query(index, np.atleast_2d(queries), k)
    sims = np.clip(q @ index.unit_keys.T, -1.0, 1.0)
    if exclude_users is not None:
        excl = np.asarray(exclude_users, dtype=np.int64)
        sims[index.user_ids[None, :] == excl[:, None]] = -np.inf
    width = min(k, len(index))
    entries = np.full((len(q), width), -1, dtype=np.int64)
    out = np.full((len(q), width), np.nan)
    for row in range(len(q)):
        pick = _select_topk(sims[row], index.user_ids, k)
        if len(pick) == 0:
            raise DataError("no eligible memory entries for query (all excluded)")
        entries[row, : len(pick)] = pick
        out[row, : len(pick)] = sims[row, pick]
    return entries, out


def retrieve_topk(index: MemoryIndex, query: np.ndarray, k: int, exclude_user: int | None = None) -> RetrievalResult:
    entries, sims = retrieve_topk_batch(index, np.asarray(query)[None], k,
                                        None if exclude_user is None else [exclude_user])
    keep = entries[0] >= 0
    return RetrievalResult(entries[0][keep], sims[0][keep], digest_arrays({"q": np.asarray(query)}))


def approx_retrieve_topk(index: MemoryIndex, query: np.ndarray, k: int, exclude_user: int | None = None,
                         nprobe: int = 1) -> RetrievalResult:
    """Search only the ``nprobe`` cells whose centroids are most similar to the query."""
    part = index.partition
    if part is None:
        raise ArtifactError("memory index has no partition; build one with with_partition() or use exact retrieve_topk")
    if nprobe < 1:
        raise ValueError(f"nprobe must be >= 1, got {nprobe}")
    q = _check_query(index, np.asarray(query)[None], k)[0]
    csims = part.centroids @ q
    cells = np.lexsort((np.arange(part.n_cells), -csims))[: min(nprobe, part.n_cells)]
    cand = np.sort(np.concatenate([part.lists[c] for c in cells]))
    if exclude_user is not None:
        cand = cand[index.user_ids[cand] != exclude_user]
    if len(cand) == 0:
        raise DataError("no eligible memory entries in probed cells")
    sims = np.clip(index.unit_keys[cand] @ q, -1.0, 1.0)
    pick = _select_topk(sims, index.user_ids[cand], k)
    return RetrievalResult(cand[pick], sims[pick], digest_arrays({"q": np.asarray(query)}))


def spherical_kmeans(x: np.ndarray, n_cells: int, seed: int = 0, n_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations on unit vectors with cosine assignment; deterministic given seed."""
    n = len(x)
    if not 1 <= n_cells <= n:
        raise ValueError(f"n_cells must be in [1, {n}], got {n_cells}")
    rng = np.random.default_rng(seed)
    centroids = x[np.sort(rng.choice(n, size=n_cells, replace=False))].copy()
    assignment = np.zeros(n, dtype=np.int64)
    for it in range(n_iter):
        new = np.argmax(x @ centroids.T, axis=1)
        if it and np.array_equal(new, assignment):
            break
        assignment = new
        for c in range(n_cells):
            members = x[assignment == c]
            if len(members) == 0:
                # reseed an empty cell with the point worst served by its centroid
                fit = np.einsum("ij,ij->i", x, centroids[assignment])
                centroids[c] = x[np.argmin(fit)]
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            centroids[c] = mean / norm if norm > 0 else members[0]
    assignment = np.argmax(x @ centroids.T, axis=1)
    return centroids, assignment


def persist_memory(index: MemoryIndex, path: str | Path) -> str:
    """Write the snapshot; entry records are fixed-width (user_id, target_item_id, key, value)."""
    d = index.dim
    record = np.dtype([("user_id", "<i8"), ("target_item_id", "<i8"), ("key", "<f4", (d,)), ("value", "<f4", (d,))])
    records = np.zeros(len(index), dtype=record)
    records["user_id"] = index.user_ids
    records["target_item_id"] = index.target_ids
    records["key"] = index.keys
    records["value"] = index.values
    arrays: dict[str, np.ndarray] = {"records": records.view(np.uint8)}
    header = {
        "format_version": MEMORY_VERSION,
        "dim": d,
        "entry_count": len(index),
        "checkpoint_digest": index.checkpoint_digest,
        "n_cells": 0,
        "digest": index.digest(),
    }
    if index.partition is not None:
        header["n_cells"] = index.partition.n_cells
        arrays["centroids"] = index.partition.centroids.astype("<f8")
        arrays["assignment"] = index.partition.assignment.astype("<i8")
    atomic_write_bytes(path, pack_container(MEMORY_MAGIC, header, arrays))
    return header["digest"]


def load_memory(path: str | Path, dim: int | None = None, expected_checkpoint_digest: str | None = None,
                strict: bool = True) -> MemoryIndex:
    header, arrays = read_container(path, MEMORY_MAGIC, "memory snapshot")
    if header.get("format_version") != MEMORY_VERSION:
        raise ArtifactError(f"memory snapshot version {header.get('format_version')} unsupported")
    d = header["dim"]
    if dim is not None and d != dim:
        raise ArtifactError(f"memory snapshot has dim {d}, expected {dim}")
    if expected_checkpoint_digest is not None and header["checkpoint_digest"] != expected_checkpoint_digest:
        msg = (f"memory snapshot was built from backbone {header['checkpoint_digest'][:12]}, "
               f"current backbone is {expected_checkpoint_digest[:12]}; rebuild memory")
        if strict:
            raise ArtifactError(msg)
        warnings.warn(msg, stacklevel=2)
    record = np.dtype([("user_id", "<i8"), ("target_item_id", "<i8"), ("key", "<f4", (d,)), ("value", "<f4", (d,))])
    raw = arrays["records"]
    if raw.size != header["entry_count"] * record.itemsize:
        raise ArtifactError("memory snapshot record block has wrong size")
    records = raw.view(record)
    partition = None
    if header["n_cells"]:
        partition = Partition(arrays["centroids"], arrays["assignment"])
    index = MemoryIndex(records["key"], records["value"], records["user_id"], records["target_item_id"],
                        header["checkpoint_digest"], partition)
    if index.digest() != header["digest"]:
        raise ArtifactError("memory snapshot digest does not match its entries")
    return index
