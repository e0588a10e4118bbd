"""Stage runners behind the CLI: prepare, train, build-memory, train-retrieval,
eval and inspect, with a digest-checked artifact manifest."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapt import Adapter, FusionConfig
from .config import RunConfig
from .dataset import FormatSpec, ProcessedDataset, load_dataset, prepare_dataset, save_dataset
from .encoder import EncoderConfig, SequenceEncoder, TrainConfig, load_checkpoint, save_checkpoint, train_backbone
from .errors import ArtifactError, ConfigError, DataError
from .evaluation import MetricReport, SweepTable, backbone_scorer, evaluate, read_scorer, sweep
from .fileio import atomic_write_text, sha256_bytes, sha256_file
from .memory import MemoryIndex, build_memory, load_memory, persist_memory
from .metrics import metrics_from_ranks, rank_items, target_ranks
from .retrieval import (ProjectionParams, RetrievalTrainConfig, load_projections, save_projections,
                        train_retrieval_module)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DATASET_FILES = ("dataset.json", "users.tsv", "items.tsv", "sequences.tsv")


def configure_runtime(threads: int) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


class Manifest:
    """Tracks the current digest of every artifact plus an append-only stage history."""

    def __init__(self, root: Path):
        self.root = root
        self.path = root / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {"format_version": MANIFEST_VERSION, "artifacts": {}, "history": []}

    def record(self, stage: str, produced: dict[str, Path], consumed: Sequence[str] = ()) -> None:
        entries = {}
        for name, path in produced.items():
            entries[name] = {"path": str(path.relative_to(self.root)), "digest": artifact_digest(path)}
        self.data["artifacts"].update(entries)
        self.data["history"].append({
            "stage": stage,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "produced": {k: v["digest"] for k, v in entries.items()},
            "consumed": {name: self.data["artifacts"][name]["digest"] for name in consumed},
        })
        atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def verify(self, name: str, hint: str) -> Path:
        entry = self.data["artifacts"].get(name)
        if entry is None:
            raise ArtifactError(f"missing artifact {name!r}; run `{hint}` first")
        path = self.root / entry["path"]
        if not path.exists():
            raise ArtifactError(f"artifact {name!r} missing on disk at {path}; run `{hint}`")
        if artifact_digest(path) != entry["digest"]:
            raise ArtifactError(f"artifact {name!r} at {path} does not match the manifest digest (stale or modified); rerun `{hint}`")
        return path

    def has(self, name: str) -> bool:
        return name in self.data["artifacts"]


def artifact_digest(path: Path) -> str:
    if path.is_dir():
        return sha256_bytes(b"".join(bytes.fromhex(sha256_file(path / f)) for f in DATASET_FILES))
    return sha256_file(path)


@dataclass
class Layout:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    def seed_dir(self, seed: int) -> Path:
        return self.root / f"seed_{seed}"

    def backbone(self, seed: int) -> Path:
        return self.seed_dir(seed) / "backbone.ckpt"

    def memory(self, seed: int) -> Path:
        return self.seed_dir(seed) / "memory.bin"

    def projections(self, seed: int) -> Path:
        return self.seed_dir(seed) / "projections.bin"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def _format_spec(cfg: RunConfig) -> FormatSpec:
    d = cfg.dataset
    if d.format == "ml-1m":
        return FormatSpec.named("ml-1m")
    delimiter = d.delimiter or FormatSpec.named(d.format).delimiter
    return FormatSpec(delimiter, d.user_col, d.item_col, d.timestamp_col, d.skip_header)


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.layout = Layout(Path(cfg.artifact_dir))
        self.layout.root.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.layout.root)
        configure_runtime(cfg.threads)

    def _persist_config(self, stage: str) -> None:
        atomic_write_text(self.layout.root / f"config.{stage}.yaml", self.cfg.to_yaml())

    # -- prepare -----------------------------------------------------------

    def prepare(self, force: bool = False) -> ProcessedDataset:
        d = self.cfg.dataset
        if (self.layout.dataset / "dataset.json").exists() and not force:
            raise ConfigError(f"{self.layout.dataset} already exists; pass --force to overwrite")
        path = Path(d.path)
        try:
            fh = open(path, encoding="utf-8", errors="replace" if d.format == "ml-1m" else "strict")
        except FileNotFoundError:
            raise DataError(f"raw interaction file not found: {path}") from None
        with fh:
            try:
                ds = prepare_dataset(fh, _format_spec(self.cfg), d.min_count, d.max_seq_len)
            except DataError as exc:
                raise DataError(f"{path}: {exc}") from None
        save_dataset(ds, self.layout.dataset)
        self._persist_config("prepare")
        self.manifest.record("prepare", {"dataset": self.layout.dataset})
        return ds

    def dataset(self) -> ProcessedDataset:
        self.manifest.verify("dataset", "readrec prepare")
        return load_dataset(self.layout.dataset, self.cfg.dataset.max_seq_len)

    # -- backbone ----------------------------------------------------------

    def encoder_config(self, item_count: int) -> EncoderConfig:
        b = self.cfg.backbone
        return EncoderConfig(item_count, b.dim, self.cfg.dataset.max_seq_len, b.n_blocks, b.n_heads, b.ff_mult, b.dropout)

    def train(self, seeds: Sequence[int], force: bool = False) -> dict[int, list[dict]]:
        ds = self.dataset()
        b = self.cfg.backbone
        logs = {}
        for seed in seeds:
            path = self.layout.backbone(seed)
            if path.exists() and self.manifest.has(f"backbone/{seed}") and not force:
                self.manifest.verify(f"backbone/{seed}", "readrec train --force")
                logger.info("seed %d: backbone exists, skipping (use --force to retrain)", seed)
                continue
            model, log = train_backbone(ds.split, self.encoder_config(ds.catalog.item_count),
                                        TrainConfig(b.lr, b.batch_size, b.epochs, b.patience, seed))
            save_checkpoint(model, path)
            atomic_write_text(self.layout.seed_dir(seed) / "backbone_log.jsonl", log.to_jsonl())
            self.manifest.record("train", {f"backbone/{seed}": path}, consumed=["dataset"])
            logs[seed] = log.records
        self._persist_config("train")
        return logs

    def backbone(self, seed: int, item_count: int) -> SequenceEncoder:
        path = self.manifest.verify(f"backbone/{seed}", "readrec train")
        return load_checkpoint(path, item_count, self.cfg.dataset.max_seq_len)

    # -- memory ------------------------------------------------------------

    def build_memory(self, seeds: Sequence[int], force: bool = False) -> dict[int, int]:
        ds = self.dataset()
        m = self.cfg.memory
        sizes = {}
        for seed in seeds:
            model = self.backbone(seed, ds.catalog.item_count)
            path = self.layout.memory(seed)
            if path.exists() and self.manifest.has(f"memory/{seed}") and not force:
                index = load_memory(self.manifest.verify(f"memory/{seed}", "readrec build-memory --force"))
                if index.checkpoint_digest == model.digest():
                    sizes[seed] = len(index)
                    continue
            index = build_memory(ds.split, model, m.granularity)
            if m.approximate:
                index = index.with_partition(min(m.n_cells, len(index)), seed=seed)
            persist_memory(index, path)
            self.manifest.record("build-memory", {f"memory/{seed}": path}, consumed=["dataset", f"backbone/{seed}"])
            sizes[seed] = len(index)
        self._persist_config("build-memory")
        return sizes

    def memory(self, seed: int, model: SequenceEncoder) -> MemoryIndex:
        path = self.manifest.verify(f"memory/{seed}", "readrec build-memory")
        try:
            return load_memory(path, model.config.dim, model.digest(), strict=True)
        except ArtifactError as exc:
            raise ArtifactError(f"memory/{seed} is stale: {exc}") from None

    # -- retrieval learning --------------------------------------------------

    def _nprobe(self) -> int | None:
        return self.cfg.memory.nprobe if self.cfg.memory.approximate else None

    def fusion_config(self, rho: float | None = None) -> FusionConfig:
        f = self.cfg.fusion
        return FusionConfig(rho if rho is not None else f.rho, literal_alpha=f.literal_alpha, fixed_alpha=f.fixed_alpha,
                            attention=self.cfg.retrieval.attention)

    def fit_projections(self, ds: ProcessedDataset, model: SequenceEncoder, index: MemoryIndex, seed: int,
                        k: int | None = None, lam: float | None = None):
        r = self.cfg.retrieval
        k = k if k is not None else r.k
        lam = lam if lam is not None else r.lam
        fusion = self.fusion_config()
        _, inputs, targets = ds.split.eval_inputs("valid")
        probe = Adapter(model, index, ProjectionParams.identity(index.dim), k, fusion, self._nprobe())
        h_valid = probe.encode(inputs)
        cached = probe.neighbours(h_valid)
        targets = np.asarray(targets)

        def validate(params: ProjectionParams) -> dict[str, float]:
            batch = probe.adapt_representations(h_valid, projections=params, neighbours=cached)
            m = metrics_from_ranks(target_ranks(batch.p_fused, targets))
            return {"HR@10": m["HR@10"], "ND@10": m["ND@10"]}

        config = RetrievalTrainConfig(k, lam, r.lr, r.epochs, r.batch_size, r.patience, seed)
        return train_retrieval_module(model, index, config, validate)

    def train_retrieval(self, seeds: Sequence[int], force: bool = False) -> dict[int, list[dict]]:
        ds = self.dataset()
        logs = {}
        for seed in seeds:
            model = self.backbone(seed, ds.catalog.item_count)
            index = self.memory(seed, model)
            path = self.layout.projections(seed)
            if path.exists() and self.manifest.has(f"projections/{seed}") and not force:
                try:
                    load_projections(self.manifest.verify(f"projections/{seed}", "readrec train-retrieval --force"),
                                     model.digest(), index.digest())
                    continue
                except ArtifactError:
                    pass
            params, log = self.fit_projections(ds, model, index, seed)
            r = self.cfg.retrieval
            save_projections(params, path, model.digest(), index.digest(), {"k": r.k, "lam": r.lam})
            atomic_write_text(self.layout.seed_dir(seed) / "retrieval_log.jsonl", log.to_jsonl())
            self.manifest.record("train-retrieval", {f"projections/{seed}": path},
                                 consumed=["dataset", f"backbone/{seed}", f"memory/{seed}"])
            logs[seed] = log.records
        self._persist_config("train-retrieval")
        return logs

    def projections(self, seed: int, model: SequenceEncoder, index: MemoryIndex) -> ProjectionParams | None:
        if self.cfg.retrieval.attention == "cosine":
            return None
        if not self.manifest.has(f"projections/{seed}"):
            raise ArtifactError(f"missing projection checkpoint for seed {seed}; run `readrec train-retrieval` first")
        path = self.manifest.verify(f"projections/{seed}", "readrec train-retrieval")
        params, _ = load_projections(path, model.digest(), index.digest())
        return params

    # -- evaluation ----------------------------------------------------------

    def _artifacts(self, ds: ProcessedDataset, seeds: Sequence[int], need_projections: bool):
        out = {}
        for seed in seeds:
            model = self.backbone(seed, ds.catalog.item_count)
            if not need_projections:
                out[seed] = (model, None, None)
                continue
            index = self.memory(seed, model)
            out[seed] = (model, index, self.projections(seed, model, index))
        return out

    def evaluate(self, mode: str, seeds: Sequence[int], sweep_axis: str | None = None,
                 sweep_values: Sequence | None = None, write: bool = True) -> MetricReport | SweepTable:
        if mode not in ("backbone", "read"):
            raise ConfigError(f"--mode must be 'backbone' or 'read', got {mode!r}")
        ds = self.dataset()
        cutoffs = tuple(self.cfg.eval.cutoffs)
        cfg_dump = self.cfg.model_dump(mode="json")
        if mode == "backbone":
            if sweep_axis:
                raise ConfigError("--sweep applies to --mode read only")
            arts = self._artifacts(ds, seeds, need_projections=False)
            report = evaluate(ds.split, {s: backbone_scorer(m) for s, (m, _, _) in arts.items()}, seeds,
                              cutoffs=cutoffs, label="backbone", config=cfg_dump)
            if write:
                self._write_report("backbone", report)
            return report

        needs_trained = sweep_axis not in ("K", "lambda")
        arts = self._artifacts(ds, seeds, need_projections=needs_trained)
        if not needs_trained:
            arts = {s: (m, self.memory(s, m), None) for s, (m, _, _) in arts.items()}
        if sweep_axis is None:
            adapters = {s: Adapter(m, idx, p, self.cfg.retrieval.k, self.fusion_config(), self._nprobe())
                        for s, (m, idx, p) in arts.items()}
            report = evaluate(ds.split, {s: read_scorer(a) for s, a in adapters.items()}, seeds,
                              cutoffs=cutoffs, label=self._read_label(), config=cfg_dump)
            if write:
                self._write_report(self._read_label(), report)
                for s, a in adapters.items():
                    self._write_predictions(ds, a, self.layout.reports / f"predictions_{self._read_label()}_seed{s}.jsonl")
            return report

        def run_point(value) -> MetricReport:
            scorers = {}
            for s, (m, idx, p) in arts.items():
                k, rho, params = self.cfg.retrieval.k, None, p
                if sweep_axis == "K":
                    k = int(value)
                    params = self._sweep_projections(ds, m, idx, s, k=k)
                elif sweep_axis == "lambda":
                    params = self._sweep_projections(ds, m, idx, s, lam=float(value))
                else:
                    rho = float(value)
                scorers[s] = read_scorer(Adapter(m, idx, params, k, self.fusion_config(rho), self._nprobe()))
            return evaluate(ds.split, scorers, seeds, cutoffs=cutoffs, label=f"{sweep_axis}={value}",
                            config={**cfg_dump, "sweep": {sweep_axis: value}})

        table = sweep(sweep_axis, list(sweep_values), run_point)
        if write:
            self.layout.reports.mkdir(parents=True, exist_ok=True)
            stem = f"sweep_{sweep_axis}"
            atomic_write_text(self.layout.reports / f"{stem}.csv", table.to_csv())
            atomic_write_text(self.layout.reports / f"{stem}.txt", table.to_text())
            atomic_write_text(self.layout.reports / f"{stem}_points.csv",
                              "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1]
                                      for i, (_, r) in enumerate(table.points)))
        return table

    def _sweep_projections(self, ds, model, index, seed, k=None, lam=None) -> ProjectionParams | None:
        if self.cfg.retrieval.attention == "cosine":
            return None
        params, _ = self.fit_projections(ds, model, index, seed, k=k, lam=lam)
        return params

    def _read_label(self) -> str:
        parts = ["read"]
        if self.cfg.retrieval.attention == "cosine":
            parts.append("cosine-attention")
        if self.cfg.fusion.fixed_alpha is not None:
            parts.append(f"alpha{self.cfg.fusion.fixed_alpha:g}")
        if self.cfg.fusion.literal_alpha:
            parts.append("literal-alpha")
        return "_".join(parts)

    def _write_report(self, name: str, report: MetricReport) -> None:
        self.layout.reports.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.layout.reports / f"{name}.csv", report.to_csv())
        atomic_write_text(self.layout.reports / f"{name}.txt", report.to_text())

    def _write_predictions(self, ds: ProcessedDataset, adapter: Adapter, path: Path, chunk: int = 512) -> None:
        users, inputs, _ = ds.split.eval_inputs("test")
        user_raw, item_raw = ds.catalog.user_raw(), ds.catalog.item_raw()
        top_n = self.cfg.eval.top_n
        lines = []
        for start in range(0, len(users), chunk):
            batch = adapter.adapt_batch(inputs[start : start + chunk])
            for row, uid in enumerate(users[start : start + chunk]):
                order = rank_items(batch.p_fused[row])[:top_n]
                trace = batch.trace(row, adapter.index)
                lines.append(json.dumps({
                    "user": user_raw[uid],
                    "user_id": uid,
                    "items": [item_raw[i] for i in order],
                    "item_ids": order.tolist(),
                    "scores": batch.p_fused[row][order].tolist(),
                    "alpha": trace.alpha,
                    "h_top_init": trace.h_top_init,
                    "h_top_aug": trace.h_top_aug,
                    "neighbours": [{"entry": e, "user_id": u, "target_item_id": t, "similarity": s, "weight": w}
                                   for e, u, t, s, w in zip(trace.entries, trace.neighbour_users, trace.target_items,
                                                            trace.similarities, trace.weights)],
                }, sort_keys=True))
        atomic_write_text(path, "\n".join(lines) + "\n")

    # -- inspect -------------------------------------------------------------

    def inspect(self, user: str, seed: int) -> str:
        ds = self.dataset()
        if user in ds.catalog.user_ids:
            uid = ds.catalog.user_ids[user]
        else:
            raise DataError(f"unknown user id {user!r}")
        model, index, params = self._artifacts(ds, [seed], need_projections=True)[seed]
        k = self.cfg.retrieval.k
        adapter = Adapter(model, index, params, k, self.fusion_config(), self._nprobe())
        window = ds.split.test_input(uid)
        ranked, trace = adapter.adapt_and_rank(window, top_n=10)
        batch = adapter.adapt_batch([window])
        item_raw, user_raw = ds.catalog.item_raw(), ds.catalog.user_raw()
        lines = [f"user {user} (dense id {uid}), seed {seed}",
                 f"test input ({len(window)} items): " + " ".join(item_raw[i] for i in window),
                 f"test target: {item_raw[ds.split.test_target(uid)]}",
                 f"retrieved neighbours (K={k}):"]
        if len(trace.entries) < k:
            lines.append(f"  note: memory holds {len(index)} entries, listing all {len(trace.entries)} (fewer than K)")
        lines.append("  rank  neighbour   target item       similarity  weight")
        for r, (u, t, s, w) in enumerate(zip(trace.neighbour_users, trace.target_items, trace.similarities,
                                             trace.weights), start=1):
            lines.append(f"  {r:>4}  {user_raw[u]:<10}  {item_raw[t]:<16}  {s:10.6f}  {w:.6f}")
        lines.append(f"  weight sum: {sum(trace.weights):.6f}")
        lines.append(f"truncated entropy initial={trace.h_top_init:.6f} augmented={trace.h_top_aug:.6f} "
                     f"(rho={self.cfg.fusion.rho:g})")
        lines.append(f"alpha={trace.alpha:.6f}")
        lines.append("top-10 fused recommendations:")
        for r, item in enumerate(ranked, start=1):
            lines.append(f"  {r:>2}  {item_raw[item]:<16}  fused={batch.p_fused[0][item]:.6f}  "
                         f"init={batch.p_init[0][item]:.6f}  aug={batch.p_aug[0][item]:.6f}")
        return "\n".join(lines) + "\n"
