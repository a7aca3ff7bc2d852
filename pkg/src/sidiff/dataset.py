"""Interaction logs, item embeddings, leave-last-out splits and sliding windows."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from sidiff.errors import ConfigError, DataError, FormatError
from sidiff.fileio import atomic_write_bytes

log = logging.getLogger(__name__)

MIN_SEQUENCE_LENGTH = 3
EMBEDDING_MAGIC = b"SIDE"

SemanticId = tuple[int, ...]


@dataclass
class InteractionLog:
    """Per-user chronological item sequences.

    ``sequences`` preserves the order in which users first appear in the
    source file so rebuilds are deterministic.
    """

    sequences: dict[str, list[str]] = field(default_factory=dict)
    timestamps: dict[str, list[int]] = field(default_factory=dict)

    @property
    def users(self) -> list[str]:
        return list(self.sequences)

    @property
    def items(self) -> set[str]:
        return {item for seq in self.sequences.values() for item in seq}

    def __len__(self) -> int:
        return len(self.sequences)

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, int]]) -> "InteractionLog":
        grouped: dict[str, list[tuple[int, int, str]]] = {}
        for order, (user, item, ts) in enumerate(records):
            grouped.setdefault(user, []).append((int(ts), order, item))
        out = cls()
        for user, rows in grouped.items():
            # stable on input order for equal timestamps
            rows.sort(key=lambda r: (r[0], r[1]))
            out.sequences[user] = [r[2] for r in rows]
            out.timestamps[user] = [r[0] for r in rows]
        return out


def load_log(path: str | Path, format: str = "tsv") -> InteractionLog:
    """Read ``user\\titem\\ttimestamp`` TSV or ``{"user","item","ts"}`` JSONL."""
    if format not in ("tsv", "jsonl"):
        raise ConfigError(f"unknown log format {format!r} (expected 'tsv' or 'jsonl')")
    path = Path(path)
    if not path.exists():
        raise DataError(f"log file not found: {path}")

    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            try:
                if format == "tsv":
                    user, item, ts = line.split("\t")
                    records.append((user, item, int(ts)))
                else:
                    obj = json.loads(line)
                    records.append((str(obj["user"]), str(obj["item"]), int(obj["ts"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
    return InteractionLog.from_records(records)


def write_log_tsv(path: str | Path, records: Iterable[tuple[str, str, int]]) -> None:
    body = "".join(f"{u}\t{i}\t{ts}\n" for u, i, ts in records)
    atomic_write_bytes(path, body.encode("utf-8"))


@dataclass
class ItemEmbeddingTable:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DataError(
                f"embedding matrix shape {self.vectors.shape} does not match {len(self.ids)} ids"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate item ids in embedding table")
        if not np.all(np.isfinite(self.vectors)):
            bad = self.ids[int(np.argwhere(~np.isfinite(self.vectors))[0, 0])]
            raise DataError(f"non-finite embedding for item {bad!r}")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {item: row for row, item in enumerate(self.ids)}

    def check_divisible(self, n: int) -> None:
        if self.dim % n:
            raise ConfigError(f"embedding dim {self.dim} is not divisible by n={n}")


def save_embeddings(path: str | Path, table: ItemEmbeddingTable) -> None:
    vecs = np.ascontiguousarray(table.vectors, dtype="<f4")
    count, dim = vecs.shape
    ids = "\n".join(table.ids).encode("utf-8")
    payload = EMBEDDING_MAGIC + struct.pack("<II", count, dim) + vecs.tobytes() + ids
    atomic_write_bytes(path, payload)


def load_embeddings(path: str | Path) -> ItemEmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    count, dim = struct.unpack_from("<II", raw, 4)
    start = 12
    end = start + 4 * count * dim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated vector block")
    vecs = np.frombuffer(raw[start:end], dtype="<f4").reshape(count, dim).astype(np.float32)
    tail = raw[end:].decode("utf-8")
    ids = tail.split("\n") if count else []
    if len(ids) != count:
        raise FormatError(f"{path}: expected {count} ids, found {len(ids)}")
    return ItemEmbeddingTable(ids=ids, vectors=vecs)


@dataclass
class UserSplit:
    train: list[str]
    valid_target: str
    test_target: str

    @property
    def valid_context(self) -> list[str]:
        return list(self.train)

    @property
    def test_context(self) -> list[str]:
        return [*self.train, self.valid_target]


@dataclass
class SplitSpec:
    users: dict[str, UserSplit]
    dropped: list[str] = field(default_factory=list)

    def summary(self) -> str:
        n_train = sum(len(s.train) for s in self.users.values())
        return (
            f"users_retained={len(self.users)}\n"
            f"users_dropped={len(self.dropped)}\n"
            f"train_interactions={n_train}\n"
            f"valid_targets={len(self.users)}\n"
            f"test_targets={len(self.users)}\n"
        )


def leave_last_out(log_: InteractionLog, min_length: int = MIN_SEQUENCE_LENGTH) -> SplitSpec:
    """Last item to test, second-to-last to validation, the rest to training."""
    users: dict[str, UserSplit] = {}
    dropped: list[str] = []
    for user, seq in log_.sequences.items():
        if len(seq) < min_length:
            dropped.append(user)
            continue
        users[user] = UserSplit(train=list(seq[:-2]), valid_target=seq[-2], test_target=seq[-1])
    if dropped:
        log.info("dropped %d users with fewer than %d interactions", len(dropped), min_length)
    return SplitSpec(users=users, dropped=dropped)


@dataclass(frozen=True)
class TrainingInstance:
    context: tuple[SemanticId, ...]
    target: SemanticId
    user: str = ""


def _lookup(tokenized: Mapping[str, SemanticId], item: str) -> SemanticId:
    try:
        return tuple(tokenized[item])
    except KeyError:
        raise DataError(f"item {item!r} has no semantic ID") from None


def truncate_context(items: Sequence[str], L_input: int) -> list[str]:
    return list(items[-L_input:]) if L_input > 0 else []


def sliding_window_expand(
    split: SplitSpec, tokenized: Mapping[str, SemanticId], L_input: int
) -> list[TrainingInstance]:
    """Every prefix of each train sequence predicts the item that follows it."""
    if L_input < 1:
        raise ConfigError(f"L_input must be >= 1, got {L_input}")
    out = []
    for user, us in split.users.items():
        sids = [_lookup(tokenized, item) for item in us.train]
        for p in range(1, len(sids)):
            ctx = sids[max(0, p - L_input):p]
            out.append(TrainingInstance(context=tuple(ctx), target=sids[p], user=user))
    return out


def eval_instances(
    split: SplitSpec, tokenized: Mapping[str, SemanticId], L_input: int, which: str = "valid"
) -> list[TrainingInstance]:
    """One instance per retained user for the validation or test target."""
    if which not in ("valid", "test"):
        raise ConfigError(f"unknown split {which!r}")
    out = []
    for user, us in split.users.items():
        if which == "valid":
            ctx, target = us.valid_context, us.valid_target
        else:
            ctx, target = us.test_context, us.test_target
        ctx_sids = tuple(_lookup(tokenized, i) for i in truncate_context(ctx, L_input))
        out.append(TrainingInstance(context=ctx_sids, target=_lookup(tokenized, target), user=user))
    return out
