"""SID-level ranking metrics, the validation score, early stopping and ESP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from sidiff.dataset import SemanticId

DEFAULT_KS = (5, 10)


@dataclass(frozen=True)
class InstanceScore:
    rank: int | None  # 1-based rank of the target, None if absent
    hits: dict[int, float]
    gains: dict[int, float]


def score_instance(candidates: Sequence[SemanticId], target: SemanticId, Ks: Iterable[int] = DEFAULT_KS) -> InstanceScore:
    """Hit and NDCG gain at each K for a single relevant SID."""
    target = tuple(target)
    rank = next((i + 1 for i, sid in enumerate(candidates) if tuple(sid) == target), None)
    hits, gains = {}, {}
    for K in Ks:
        hit = rank is not None and rank <= K
        hits[K] = 1.0 if hit else 0.0
        gains[K] = 1.0 / math.log2(rank + 1) if hit else 0.0
    return InstanceScore(rank=rank, hits=hits, gains=gains)


@dataclass
class EvalOutcome:
    recall_at: dict[int, float]
    ndcg_at: dict[int, float]
    ranks: list[int | None] = field(default_factory=list)

    @classmethod
    def aggregate(cls, scores: Sequence[InstanceScore], Ks: Iterable[int] = DEFAULT_KS) -> "EvalOutcome":
        Ks = sorted(Ks)
        count = len(scores)
        recall = {K: (sum(s.hits[K] for s in scores) / count if count else 0.0) for K in Ks}
        ndcg = {K: (sum(s.gains[K] for s in scores) / count if count else 0.0) for K in Ks}
        return cls(recall_at=recall, ndcg_at=ndcg, ranks=[s.rank for s in scores])

    def to_text(self, header: dict[str, str] | None = None) -> str:
        lines = [f"# {k}: {v}" for k, v in (header or {}).items()]
        lines.append(f"instances={len(self.ranks)}")
        for K in sorted(self.recall_at):
            lines.append(f"recall@{K}={self.recall_at[K]:.6f}")
            lines.append(f"ndcg@{K}={self.ndcg_at[K]:.6f}")
        if 10 in self.recall_at:
            lines.append(f"validation_score={validation_score(self):.6f}")
        return "\n".join(lines) + "\n"


def validation_score(outcome: EvalOutcome) -> float:
    return 0.8 * outcome.ndcg_at[10] + 0.2 * outcome.recall_at[10]


class EarlyStopper:
    """Stop after ``patience`` epochs without strict improvement.

    Epochs are 1-based; ``best_epoch`` is the first epoch attaining the
    best score so far.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        """Record one epoch's score; True means stop now."""
        self.epoch += 1
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def replay_early_stop(scores: Sequence[float], patience: int) -> tuple[int | None, int]:
    """(stop epoch or None, best epoch) for a full score trace."""
    stopper = EarlyStopper(patience)
    for s in scores:
        if stopper.update(s):
            return stopper.epoch, stopper.best_epoch
    return None, stopper.best_epoch


@dataclass
class TrainTrace:
    views_per_sample_per_epoch: int
    scores: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int | None = None

    @property
    def esp(self) -> int:
        """Effective sample passes: best epoch times views per sample per epoch."""
        return self.best_epoch * self.views_per_sample_per_epoch

    def to_text(self) -> str:
        lines = [
            f"views_per_sample_per_epoch={self.views_per_sample_per_epoch}",
            f"best_epoch={self.best_epoch}",
            f"stopped_epoch={self.stopped_epoch if self.stopped_epoch is not None else 'none'}",
            f"esp={self.esp}",
        ]
        for epoch, (loss, score) in enumerate(zip(self.losses, self.scores), start=1):
            lines.append(f"epoch={epoch} loss={loss:.6f} score={score:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainTrace":
        head, losses, scores = {}, [], []
        for line in text.splitlines():
            if line.startswith("epoch="):
                parts = dict(p.split("=", 1) for p in line.split())
                losses.append(float(parts["loss"]))
                scores.append(float(parts["score"]))
            elif "=" in line:
                k, v = line.split("=", 1)
                head[k] = v
        stopped = head.get("stopped_epoch", "none")
        return cls(
            views_per_sample_per_epoch=int(head["views_per_sample_per_epoch"]),
            scores=scores,
            losses=losses,
            best_epoch=int(head["best_epoch"]),
            stopped_epoch=None if stopped == "none" else int(stopped),
        )
