"""Causal self-attention sequence encoder with full-softmax next-item training."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import LeaveOneOutSplit
from .errors import ArtifactError, DataError, TrainingDivergedError
from .fileio import atomic_write_bytes, digest_arrays, pack_container, read_container
from .metrics import metrics_from_ranks, target_ranks

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"READBKB\x00"
CHECKPOINT_VERSION = 1
PAD = -1


@dataclass(frozen=True)
class EncoderConfig:
    item_count: int
    dim: int = 64
    max_seq_len: int = 50
    n_blocks: int = 2
    n_heads: int = 2
    ff_mult: int = 4
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    patience: int = 10
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError(f"invalid training config {self}")


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, length, dim = x.shape
        split = lambda t: t.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        weights = self.attn_drop(torch.softmax(scores, dim=-1))
        ctx = (weights @ v).transpose(1, 2).reshape(b, length, dim)
        return self.out(ctx)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_mult: int, dropout: float):
        super().__init__()
        self.ln_attn = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads, dropout)
        self.ln_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.ln_attn(x), allowed))
        return x + self.drop(self.ff(self.ln_ff(x)))


class SequenceEncoder(nn.Module):
    """SASRec-style backbone.

    The item embedding table doubles as the output projection: logits are
    ``h @ item_embeddings.T``. Inputs are left-padded with ``PAD`` to
    ``max_seq_len`` so the representation is always read at the last position.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.item_embeddings = nn.Embedding(config.item_count, d)
        self.positions = nn.Embedding(config.max_seq_len, d)
        self.input_drop = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.n_heads, config.ff_mult, config.dropout) for _ in range(config.n_blocks)
        )
        self.final_ln = nn.LayerNorm(d)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, mean=0.0, std=0.02)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def hidden_states(self, seqs: torch.Tensor) -> torch.Tensor:
        """(B, L) padded id matrix -> (B, L, d) per-position representations."""
        valid = seqs != PAD
        ids = seqs.clamp(min=0)
        length = seqs.shape[1]
        x = self.item_embeddings(ids) * math.sqrt(self.config.dim)
        x = x + self.positions.weight[-length:][None]
        x = self.input_drop(x) * valid[..., None]
        causal = torch.tril(torch.ones(length, length, dtype=torch.bool, device=seqs.device))
        allowed = causal[None] & valid[:, None, :]
        # self-attention to own slot keeps fully padded rows finite
        allowed = allowed | torch.eye(length, dtype=torch.bool, device=seqs.device)[None]
        for block in self.blocks:
            x = block(x, allowed) * valid[..., None]
        return self.final_ln(x) * valid[..., None]

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        return self.hidden_states(seqs)[:, -1]

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.item_embeddings.weight.T

    def table(self) -> np.ndarray:
        return self.item_embeddings.weight.detach().cpu().numpy().copy()

    def digest(self) -> str:
        return backbone_digest(self)


def backbone_digest(model: nn.Module) -> str:
    return digest_arrays({k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})


def pad_windows(windows: Sequence[Sequence[int]], length: int, item_count: int | None = None) -> torch.Tensor:
    out = np.full((len(windows), length), PAD, dtype=np.int64)
    for row, w in enumerate(windows):
        w = list(w)[-length:]
        if not w:
            raise DataError("empty item window")
        out[row, length - len(w):] = w
    if item_count is not None and len(windows):
        real = out[out != PAD]
        if real.size and (real.min() < 0 or real.max() >= item_count):
            bad = real[(real < 0) | (real >= item_count)][0]
            raise DataError(f"item id {bad} outside catalog [0, {item_count})")
    return torch.from_numpy(out)


@torch.no_grad()
def encode_batch(model: SequenceEncoder, windows: Sequence[Sequence[int]], batch_size: int = 1024) -> np.ndarray:
    """Inference-mode representations for many windows, (N, d) in the model dtype."""
    was_training = model.training
    model.eval()
    try:
        cfg = model.config
        chunks = []
        for start in range(0, len(windows), batch_size):
            seqs = pad_windows(windows[start : start + batch_size], cfg.max_seq_len, cfg.item_count)
            chunks.append(model(seqs).cpu().numpy())
        if not chunks:
            return model.item_embeddings.weight.new_zeros((0, cfg.dim)).numpy()
        return np.concatenate(chunks)
    finally:
        model.train(was_training)


def encode_sequence(model: SequenceEncoder, items: Sequence[int]) -> np.ndarray:
    if not 1 <= len(items) <= model.config.max_seq_len:
        raise DataError(f"window length {len(items)} outside [1, {model.config.max_seq_len}]")
    return encode_batch(model, [items])[0]


def score_items(h: np.ndarray, table: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[-1] != table.shape[1]:
        raise ValueError(f"representation dim {h.shape[-1]} != embedding dim {table.shape[1]}")
    return h @ table.T


def softmax_over_catalog(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite logit")
    z = np.exp(r - r.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def sequence_loss(model: SequenceEncoder, windows: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Full-softmax next-item cross-entropy over every prefix in the windows.

    ``windows`` is a padded (B, L + 1) matrix; position j of ``windows[:, :-1]``
    is trained to predict ``windows[:, j + 1]``.
    """
    inputs, targets = windows[:, :-1], windows[:, 1:]
    hidden = model.hidden_states(inputs)
    mask = (inputs != PAD) & (targets != PAD)
    logits = model.logits(hidden[mask])
    return F.cross_entropy(logits, targets[mask], reduction=reduction)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_value: float = float("-inf")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def evaluate_backbone(model: SequenceEncoder, split: LeaveOneOutSplit, stage: str = "valid") -> dict[str, float]:
    _, inputs, targets = split.eval_inputs(stage)
    table = model.table()
    ranks = []
    for start in range(0, len(inputs), 512):
        h = encode_batch(model, inputs[start : start + 512])
        ranks.append(target_ranks(score_items(h, table), np.asarray(targets[start : start + 512])))
    return metrics_from_ranks(np.concatenate(ranks))


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def build_encoder(config: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> SequenceEncoder:
    torch.manual_seed(seed)
    return SequenceEncoder(config).to(dtype)


def train_backbone(split: LeaveOneOutSplit, encoder_config: EncoderConfig, config: TrainConfig,
                   on_epoch: Callable[[dict], None] | None = None) -> tuple[SequenceEncoder, TrainingLog]:
    """Adam on the full-softmax prefix loss, keeping the best validation ND@10 checkpoint."""
    if split.user_count == 0:
        raise DataError("empty split")
    model = build_encoder(encoder_config, config.seed)
    log = TrainingLog()
    if config.epochs == 0:
        return model, log
    windows = split.train_windows()
    if not windows:
        raise DataError("no user has a training region of length >= 2")
    data = pad_windows(windows, encoder_config.max_seq_len + 1)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), weight_decay=0.0)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = data[torch.from_numpy(order[start : start + config.batch_size])]
            loss = sequence_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"backbone loss became {loss.item()} at epoch {epoch}, batch {start // config.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        record = {"epoch": epoch, "loss": total / count}
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            m = evaluate_backbone(model, split, "valid")
            record.update({"HR@10": m["HR@10"], "ND@10": m["ND@10"]})
            if m["ND@10"] > log.best_value:
                log.best_value, log.best_epoch = m["ND@10"], epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
        log.records.append(record)
        logger.info("backbone epoch %d %s", epoch, record)
        if on_epoch:
            on_epoch(record)
        if stale >= config.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return model, log


def save_checkpoint(model: SequenceEncoder, path: str | Path) -> str:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "digest": digest_arrays(state)}
    atomic_write_bytes(path, pack_container(CHECKPOINT_MAGIC, header, state))
    return header["digest"]


def load_checkpoint(path: str | Path, item_count: int | None = None, max_seq_len: int | None = None) -> SequenceEncoder:
    header, arrays = read_container(path, CHECKPOINT_MAGIC, "backbone checkpoint")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"backbone checkpoint version {header.get('format_version')} unsupported")
    config = EncoderConfig(**header["config"])
    if item_count is not None and config.item_count != item_count:
        raise ArtifactError(f"checkpoint has {config.item_count} items, catalog has {item_count}")
    if max_seq_len is not None and config.max_seq_len != max_seq_len:
        raise ArtifactError(f"checkpoint max_seq_len {config.max_seq_len} != {max_seq_len}")
    if digest_arrays(arrays) != header["digest"]:
        raise ArtifactError("backbone checkpoint digest does not match its tensors")
    dtype = torch.from_numpy(arrays["item_embeddings.weight"]).dtype
    model = SequenceEncoder(config).to(dtype)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.eval()
    return model
