"""Interaction-log ingestion, k-core filtering and leave-one-out splitting."""

from __future__ import annotations

import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

from .errors import DataError
from .fileio import atomic_write_text

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
DEFAULT_MAX_SEQ_LEN = 50


@dataclass(frozen=True)
class Interaction:
    user_raw_id: str
    item_raw_id: str
    timestamp: int


@dataclass(frozen=True)
class FormatSpec:
    """Column mapping for a delimiter-separated interaction file."""

    delimiter: str = "\t"
    user_col: int = 0
    item_col: int = 1
    timestamp_col: int = 2
    skip_header: bool = False

    @classmethod
    def named(cls, name: str) -> "FormatSpec":
        presets = {
            "tsv": cls("\t"),
            "csv": cls(","),
            # MovieLens ratings.dat: user::item::rating::timestamp
            "ml-1m": cls("::", 0, 1, 3),
        }
        try:
            return presets[name]
        except KeyError:
            raise DataError(f"unknown format preset {name!r}; choose from {sorted(presets)}") from None


@dataclass
class Catalog:
    user_ids: dict[str, int]
    item_ids: dict[str, int]

    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    def item_raw(self) -> list[str]:
        out = [""] * self.item_count
        for raw, idx in self.item_ids.items():
            out[idx] = raw
        return out

    def user_raw(self) -> list[str]:
        out = [""] * self.user_count
        for raw, idx in self.user_ids.items():
            out[idx] = raw
        return out


@dataclass(frozen=True)
class UserSequence:
    user_id: int
    items: tuple[int, ...]


def ingest_interactions(source: TextIO | Iterable[str], format_spec: FormatSpec = FormatSpec()) -> list[Interaction]:
    """Parse one interaction per non-empty line, preserving input order."""
    out: list[Interaction] = []
    need = max(format_spec.user_col, format_spec.item_col, format_spec.timestamp_col) + 1
    first_data_line = True
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        cols = line.split(format_spec.delimiter)
        if len(cols) < need:
            raise DataError(f"line {lineno}: expected at least {need} columns, got {len(cols)}")
        user, item, ts = (cols[format_spec.user_col].strip(), cols[format_spec.item_col].strip(),
                          cols[format_spec.timestamp_col].strip())
        try:
            stamp = int(ts)
        except ValueError:
            try:
                fstamp = float(ts)
            except ValueError:
                if format_spec.skip_header and first_data_line:
                    first_data_line = False
                    continue
                raise DataError(f"line {lineno}: non-numeric timestamp {ts!r}") from None
            stamp = int(fstamp)
        if not user or not item:
            raise DataError(f"line {lineno}: empty user or item id")
        first_data_line = False
        out.append(Interaction(user, item, stamp))
    if not out:
        raise DataError("no interactions found in input (empty stream)")
    logger.info("ingested %d interactions", len(out))
    return out


def _assign_ids(interactions: list[Interaction]) -> Catalog:
    # stable sort keeps input order for equal timestamps
    ordered = sorted(range(len(interactions)), key=lambda i: interactions[i].timestamp)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    for i in ordered:
        rec = interactions[i]
        users.setdefault(rec.user_raw_id, len(users))
        items.setdefault(rec.item_raw_id, len(items))
    return Catalog(users, items)


def apply_core_filter(interactions: list[Interaction], min_count: int = 5) -> tuple[list[Interaction], Catalog]:
    """Drop users and items with fewer than ``min_count`` interactions until stable."""
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    current = list(interactions)
    while True:
        ucount = Counter(r.user_raw_id for r in current)
        icount = Counter(r.item_raw_id for r in current)
        kept = [r for r in current if ucount[r.user_raw_id] >= min_count and icount[r.item_raw_id] >= min_count]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DataError(f"no interactions survive {min_count}-core filtering")
    return current, _assign_ids(current)


def build_sequences(interactions: list[Interaction], catalog: Catalog) -> list[UserSequence]:
    """Chronological per-user item sequences, ordered by dense user id."""
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for pos, rec in enumerate(interactions):
        uid = catalog.user_ids[rec.user_raw_id]
        per_user.setdefault(uid, []).append((rec.timestamp, pos, catalog.item_ids[rec.item_raw_id]))
    seqs = []
    for uid in sorted(per_user):
        events = sorted(per_user[uid])
        seqs.append(UserSequence(uid, tuple(e[2] for e in events)))
    return seqs


@dataclass
class LeaveOneOutSplit:
    """Per-user leave-one-out split over full chronological sequences.

    For a sequence of length n the last item is the test target, item n-1 the
    validation target and items 1..n-2 the training region. Model inputs are
    always the trailing ``max_seq_len`` window of the relevant prefix.
    """

    sequences: list[UserSequence]
    item_count: int
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    _by_user: dict[int, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_user = {s.user_id: s.items for s in self.sequences}

    @property
    def users(self) -> list[int]:
        return [s.user_id for s in self.sequences]

    @property
    def user_count(self) -> int:
        return len(self.sequences)

    def sequence(self, user_id: int) -> tuple[int, ...]:
        try:
            return self._by_user[user_id]
        except KeyError:
            raise DataError(f"unknown user id {user_id}") from None

    def window(self, items: tuple[int, ...] | list[int]) -> tuple[int, ...]:
        return tuple(items[-self.max_seq_len :])

    def train_region(self, user_id: int) -> tuple[int, ...]:
        return self.sequence(user_id)[:-2]

    def valid_target(self, user_id: int) -> int:
        return self.sequence(user_id)[-2]

    def test_target(self, user_id: int) -> int:
        return self.sequence(user_id)[-1]

    def valid_input(self, user_id: int) -> tuple[int, ...]:
        return self.window(self.train_region(user_id))

    def test_input(self, user_id: int) -> tuple[int, ...]:
        return self.window(self.sequence(user_id)[:-1])

    def train_windows(self) -> list[tuple[int, ...]]:
        """Trailing (max_seq_len + 1) window of each training region.

        Position j of the window predicts position j + 1, which yields every
        subsequence-label pair inside the window in one pass.
        """
        out = []
        for s in self.sequences:
            region = s.items[:-2]
            if len(region) >= 2:
                out.append(tuple(region[-(self.max_seq_len + 1) :]))
        return out

    def eval_inputs(self, stage: str) -> tuple[list[int], list[tuple[int, ...]], list[int]]:
        if stage == "valid":
            return self.users, [self.valid_input(u) for u in self.users], [self.valid_target(u) for u in self.users]
        if stage == "test":
            return self.users, [self.test_input(u) for u in self.users], [self.test_target(u) for u in self.users]
        raise ValueError(f"stage must be 'valid' or 'test', got {stage!r}")


def split_leave_one_out(sequences: list[UserSequence], max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
                        item_count: int | None = None) -> LeaveOneOutSplit:
    if max_seq_len < 1:
        raise DataError(f"max_seq_len must be >= 1, got {max_seq_len}")
    for s in sequences:
        if len(s.items) < 3:
            raise DataError(f"user {s.user_id}: sequence length {len(s.items)} < 3, cannot split leave-one-out")
    if item_count is None:
        item_count = 1 + max((max(s.items) for s in sequences), default=-1)
    return LeaveOneOutSplit(list(sequences), item_count, max_seq_len)


@dataclass
class DatasetStats:
    users: int
    items: int
    interactions: int

    @property
    def avg_actions(self) -> float:
        return self.interactions / self.users

    @property
    def sparsity(self) -> float:
        return 1.0 - self.interactions / (self.users * self.items)

    def format(self) -> str:
        return (
            f"#Users         {self.users:,}\n"
            f"#Items         {self.items:,}\n"
            f"#Interactions  {self.interactions:,}\n"
            f"Avg. Actions   {self.avg_actions:.2f}\n"
            f"Sparsity       {100 * self.sparsity:.2f}%"
        )


@dataclass
class ProcessedDataset:
    catalog: Catalog
    split: LeaveOneOutSplit

    @property
    def stats(self) -> DatasetStats:
        return DatasetStats(self.catalog.user_count, self.catalog.item_count,
                            sum(len(s.items) for s in self.split.sequences))


def prepare_dataset(source: TextIO | Iterable[str], format_spec: FormatSpec = FormatSpec(), min_count: int = 5,
                    max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> ProcessedDataset:
    interactions = ingest_interactions(source, format_spec)
    kept, catalog = apply_core_filter(interactions, min_count)
    seqs = build_sequences(kept, catalog)
    short = [s for s in seqs if len(s.items) < 3]
    if short:
        # only reachable with min_count < 3
        logger.warning("dropping %d users with fewer than 3 interactions", len(short))
        seqs = [s for s in seqs if len(s.items) >= 3]
    return ProcessedDataset(catalog, split_leave_one_out(seqs, max_seq_len, catalog.item_count))


# On-disk layout of a processed dataset directory:
#   dataset.json   header {format_version, user_count, item_count, max_seq_len, interaction_count}
#   users.tsv      raw_id <TAB> dense_id, in dense-id order
#   items.tsv      raw_id <TAB> dense_id, in dense-id order
#   sequences.tsv  dense user id <TAB> space-separated dense item ids (full chronological sequence)

def _tsv_map(raw_ids: list[str]) -> str:
    return "".join(f"{raw}\t{i}\n" for i, raw in enumerate(raw_ids))


def save_dataset(ds: ProcessedDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stats = ds.stats
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "user_count": ds.catalog.user_count,
        "item_count": ds.catalog.item_count,
        "max_seq_len": ds.split.max_seq_len,
        "interaction_count": stats.interactions,
    }
    buf = io.StringIO()
    for s in ds.split.sequences:
        buf.write(f"{s.user_id}\t{' '.join(map(str, s.items))}\n")
    atomic_write_text(directory / "users.tsv", _tsv_map(ds.catalog.user_raw()))
    atomic_write_text(directory / "items.tsv", _tsv_map(ds.catalog.item_raw()))
    atomic_write_text(directory / "sequences.tsv", buf.getvalue())
    # header last: its presence marks a complete directory
    atomic_write_text(directory / "dataset.json", json.dumps(header, indent=2, sort_keys=True) + "\n")


def _read_map(path: Path) -> dict[str, int]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        raw, idx = line.rsplit("\t", 1)
        out[raw] = int(idx)
    return out


def load_dataset(directory: str | Path, max_seq_len: int | None = None) -> ProcessedDataset:
    directory = Path(directory)
    try:
        header = json.loads((directory / "dataset.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{directory} is not a processed dataset (missing dataset.json)") from None
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"dataset format version {header.get('format_version')} unsupported")
    catalog = Catalog(_read_map(directory / "users.tsv"), _read_map(directory / "items.tsv"))
    seqs = []
    for line in (directory / "sequences.tsv").read_text(encoding="utf-8").splitlines():
        uid, items = line.split("\t")
        seqs.append(UserSequence(int(uid), tuple(int(x) for x in items.split())))
    if catalog.user_count != header["user_count"] or catalog.item_count != header["item_count"]:
        raise DataError(f"{directory}: id maps disagree with header counts")
    split = split_leave_one_out(seqs, max_seq_len or header["max_seq_len"], catalog.item_count)
    return ProcessedDataset(catalog, split)
