"""Leave-one-out full-ranking evaluation, multi-seed aggregation and sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .adapt import Adapter
from .dataset import LeaveOneOutSplit
from .encoder import SequenceEncoder, encode_batch, score_items
from .errors import ArtifactError
from .fileio import sha256_bytes
from .metrics import DEFAULT_CUTOFFS, metrics_from_ranks, target_ranks

# windows -> (B, |V|) final scores; higher is better
Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]


def backbone_scorer(model: SequenceEncoder) -> Scorer:
    table = model.table()
    return lambda windows: score_items(encode_batch(model, windows), table)


def read_scorer(adapter: Adapter) -> Scorer:
    return lambda windows: adapter.adapt_batch(windows).p_fused


def rank_targets(split: LeaveOneOutSplit, scorer: Scorer, stage: str = "test", chunk: int = 512) -> tuple[list[int], np.ndarray]:
    users, inputs, targets = split.eval_inputs(stage)
    ranks = [target_ranks(scorer(inputs[s : s + chunk]), np.asarray(targets[s : s + chunk]))
             for s in range(0, len(inputs), chunk)]
    return users, np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


@dataclass
class MetricReport:
    per_seed: dict[int, dict[str, float]]
    users: list[int] = field(default_factory=list)
    label: str = ""
    fingerprint: str = ""

    @property
    def metric_names(self) -> list[str]:
        first = next(iter(self.per_seed.values()))
        return list(first)

    def mean(self, metric: str) -> float:
        return float(np.mean([m[metric] for m in self.per_seed.values()]))

    def std(self, metric: str) -> float:
        vals = [m[metric] for m in self.per_seed.values()]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def summary(self) -> dict[str, float]:
        return {name: self.mean(name) for name in self.metric_names}

    def rows(self) -> list[dict[str, str]]:
        out = []
        for seed in sorted(self.per_seed):
            for name, value in self.per_seed[seed].items():
                out.append({"label": self.label, "seed": str(seed), "metric": name, "value": _fmt(value)})
        for name in self.metric_names:
            out.append({"label": self.label, "seed": "mean", "metric": name, "value": _fmt(self.mean(name))})
            out.append({"label": self.label, "seed": "std", "metric": name, "value": _fmt(self.std(name))})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["label", "seed", "metric", "value"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        names = self.metric_names
        lines = [f"{self.label or 'report'}  ({len(self.per_seed)} seed(s), {len(self.users)} users)",
                 "seed    " + "  ".join(f"{n:>8}" for n in names)]
        for seed in sorted(self.per_seed):
            lines.append(f"{seed:<8}" + "  ".join(f"{self.per_seed[seed][n]:8.4f}" for n in names))
        lines.append("mean    " + "  ".join(f"{self.mean(n):8.4f}" for n in names))
        lines.append("std     " + "  ".join(f"{self.std(n):8.4f}" for n in names))
        return "\n".join(lines) + "\n"


def evaluate(split: LeaveOneOutSplit, pipelines: Mapping[int, Scorer], seeds: Iterable[int], stage: str = "test",
             cutoffs: Sequence[int] = DEFAULT_CUTOFFS, label: str = "", config: Mapping | None = None) -> MetricReport:
    """Rank every test target against the whole catalog, once per seed's artifacts."""
    per_seed: dict[int, dict[str, float]] = {}
    users: list[int] = []
    for seed in seeds:
        if seed not in pipelines:
            raise ArtifactError(f"no trained artifacts for seed {seed}")
        users, ranks = rank_targets(split, pipelines[seed], stage)
        per_seed[seed] = metrics_from_ranks(ranks, cutoffs)
    if not per_seed:
        raise ValueError("evaluate needs at least one seed")
    fingerprint = sha256_bytes(json.dumps(config or {}, sort_keys=True, default=str).encode())[:16]
    return MetricReport(per_seed, users, label, fingerprint)


@dataclass
class SweepTable:
    axis: str
    points: list[tuple[object, MetricReport]]

    def best(self, metric: str = "ND@10") -> tuple[object, float]:
        value, report = max(self.points, key=lambda p: p[1].mean(metric))
        return value, report.mean(metric)

    def argmax_is_interior(self, metric: str = "ND@10") -> bool:
        means = [r.mean(metric) for _, r in self.points]
        i = int(np.argmax(means))
        return 0 < i < len(means) - 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = self.points[0][1].metric_names
        writer.writerow([self.axis] + [f"{n}_mean" for n in names] + [f"{n}_std" for n in names])
        for value, report in self.points:
            writer.writerow([value] + [_fmt(report.mean(n)) for n in names] + [_fmt(report.std(n)) for n in names])
        return buf.getvalue()

    def to_text(self) -> str:
        names = self.points[0][1].metric_names
        lines = [f"sweep over {self.axis}", f"{self.axis:>8}  " + "  ".join(f"{n:>8}" for n in names)]
        for value, report in self.points:
            lines.append(f"{str(value):>8}  " + "  ".join(f"{report.mean(n):8.4f}" for n in names))
        best_value, best_score = self.best()
        lines.append(f"best ND@10 at {self.axis}={best_value} ({best_score:.4f})")
        return "\n".join(lines) + "\n"


SWEEP_AXES = ("K", "lambda", "rho")


def sweep(axis: str, values: Sequence, run_point: Callable[[object], MetricReport]) -> SweepTable:
    """Evaluate ``run_point`` at each grid value; everything else is held by the caller."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("sweep grid is empty")
    points = []
    for v in values:
        report = run_point(v)
        report.label = report.label or f"{axis}={v}"
        points.append((v, report))
    return SweepTable(axis, points)
