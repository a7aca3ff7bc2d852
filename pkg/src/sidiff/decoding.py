"""Top-K semantic-ID decoding from the masked-diffusion decoder.

``cpd_decode`` is a global beam search over (branch, masked digit,
codeword) fills: every step commits one digit per surviving branch, chosen
jointly across all branches and all still-masked digits by accumulated
log-probability.  ``exact_oracle`` returns what that search would return
with no truncation, computed independently by dynamic programming over
partial SIDs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from sidiff.dataset import SemanticId
from sidiff.errors import ConfigError
from sidiff.network import EncoderState, SidDiffusionModel

ORACLE_LIMIT = 10**6


@dataclass(frozen=True)
class BeamBranch:
    slots: tuple[int, ...]  # codeword or -1 for masked
    score: float
    fills: tuple[tuple[int, int, float], ...] = ()  # (digit, codeword, log p) in commit order

    @property
    def masked(self) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.slots) if v < 0)

    @property
    def complete(self) -> bool:
        return all(v >= 0 for v in self.slots)


@dataclass
class DecodeResult:
    candidates: list[tuple[SemanticId, float]]
    short: bool = False  # fewer than K unique completions
    dropped: int = 0
    branches: list[BeamBranch] = field(default_factory=list, repr=False)

    @property
    def sids(self) -> list[SemanticId]:
        return [sid for sid, _ in self.candidates]

    def __len__(self) -> int:
        return len(self.candidates)

    def to_tsv(self, items_by_sid: dict[SemanticId, list[str]] | None = None) -> str:
        lines = []
        for rank, (sid, score) in enumerate(self.candidates, start=1):
            items = ",".join((items_by_sid or {}).get(sid, []))
            lines.append(f"{rank}\t{score:.9g}\t{','.join(map(str, sid))}\t{items}")
        return "\n".join(lines) + ("\n" if lines else "")


def _check(B_act: int, K: int) -> None:
    if B_act < 1 or K < 1:
        raise ConfigError(f"B_act and K must be >= 1 (B_act={B_act}, K={K})")


def _single(state: EncoderState) -> EncoderState:
    if len(state) != 1:
        raise ConfigError("decoding expects a single-history encoder state")
    return state


@torch.no_grad()
def _branch_log_probs(
    model: SidDiffusionModel, state: EncoderState, slot_rows: Sequence[Sequence[int]]
) -> np.ndarray:
    """log p for every digit of every partial SID in one batched call; (B, n, M) float64."""
    mask = model.cfg.mask_token
    slots = torch.tensor([[mask if v < 0 else v for v in row] for row in slot_rows], dtype=torch.long)
    expanded = state.select([0] * len(slot_rows))
    return model.log_probs(slots, expanded).double().numpy()


def _finalize(branches: Iterable[BeamBranch], K: int) -> DecodeResult:
    best: dict[SemanticId, BeamBranch] = {}
    for br in branches:
        sid = br.slots
        if sid not in best or br.score > best[sid].score:
            best[sid] = br
    ranked = sorted(best.values(), key=lambda br: (-br.score, br.slots))
    top = ranked[:K]
    return DecodeResult(
        candidates=[(br.slots, br.score) for br in top],
        short=len(top) < K,
        branches=top,
    )


def _expand(
    model: SidDiffusionModel,
    state: EncoderState,
    beam: list[BeamBranch],
    B_act: int | None,
    digits_for: callable,
) -> list[BeamBranch]:
    logp = _branch_log_probs(model, state, [br.slots for br in beam])
    children = []
    for b, br in enumerate(beam):
        for k in digits_for(br):
            for c in range(logp.shape[2]):
                lp = float(logp[b, k, c])
                children.append((-(br.score + lp), b, k, c, lp))
    # (higher score, lower branch, lower digit, lower codeword)
    children.sort(key=lambda t: t[:4])
    if B_act is not None:
        children = children[:B_act]
    out = []
    for neg, b, k, c, lp in children:
        br = beam[b]
        slots = list(br.slots)
        slots[k] = c
        out.append(BeamBranch(tuple(slots), -neg, br.fills + ((k, c, lp),)))
    return out


def cpd_decode(
    model: SidDiffusionModel, state: EncoderState, B_act: int, K: int
) -> DecodeResult:
    """Confidence-guided parallel beam search; ``n`` decoder rounds."""
    _check(B_act, K)
    return _cpd(model, _single(state), B_act, K)


def _cpd(model: SidDiffusionModel, state: EncoderState, B_act: int | None, K: int) -> DecodeResult:
    n = model.cfg.n
    beam = [BeamBranch(tuple([-1] * n), 0.0)]
    for _ in range(n):
        beam = _expand(model, state, beam, B_act, lambda br: br.masked)
    return _finalize(beam, K)


def cpd_untruncated(model: SidDiffusionModel, state: EncoderState, K: int) -> DecodeResult:
    """CPD keeping every child at every step."""
    _check(1, K)
    return _cpd(model, _single(state), None, K)


def branch_space(n: int, M: int) -> int:
    """Number of complete fill paths: every digit order times every codeword."""
    return math.factorial(n) * M**n


def exact_oracle(model: SidDiffusionModel, state: EncoderState, K: int) -> DecodeResult:
    """True top-K under the CPD scoring rule by exhaustive search.

    A SID's score is the best accumulated log-probability over all orders
    in which its digits can be filled.  Partial SIDs are processed level by
    level (number of filled digits) and each partial SID is scored once.
    """
    _check(1, K)
    state = _single(state)
    n, M = model.cfg.n, model.cfg.M
    if M**n > ORACLE_LIMIT:
        raise ConfigError(f"M^n = {M**n} exceeds the oracle limit of {ORACLE_LIMIT}")
    best: dict[tuple[int, ...], float] = {tuple([-1] * n): 0.0}
    for _ in range(n):
        level = list(best)
        logp = _branch_log_probs(model, state, level)
        nxt: dict[tuple[int, ...], float] = {}
        for row, partial in enumerate(level):
            base = best[partial]
            for k in (k for k, v in enumerate(partial) if v < 0):
                for c in range(M):
                    child = partial[:k] + (c,) + partial[k + 1:]
                    s = base + float(logp[row, k, c])
                    if child not in nxt or s > nxt[child]:
                        nxt[child] = s
        best = nxt
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:K]
    return DecodeResult(candidates=ranked, short=len(ranked) < K)


def fixed_order_beam(
    model: SidDiffusionModel,
    state: EncoderState,
    order: Sequence[int],
    B_act: int,
    K: int,
) -> DecodeResult:
    """Beam search that fills digits strictly in ``order``."""
    _check(B_act, K)
    n = model.cfg.n
    if sorted(order) != list(range(n)):
        raise ConfigError(f"order {list(order)} is not a permutation of 0..{n - 1}")
    state = _single(state)
    beam = [BeamBranch(tuple([-1] * n), 0.0)]
    for k in order:
        beam = _expand(model, state, beam, B_act, lambda br, k=k: (k,))
    return _finalize(beam, K)


def replay_score(model: SidDiffusionModel, state: EncoderState, fills: Sequence[tuple[int, int]]) -> float:
    """Recompute a branch score by committing ``fills`` one at a time."""
    n = model.cfg.n
    slots = [-1] * n
    total = 0.0
    for k, c in fills:
        total += float(_branch_log_probs(model, state, [slots])[0, k, c])
        slots[k] = c
    return total


def filter_to_catalog(result: DecodeResult, catalog: Iterable[SemanticId]) -> DecodeResult:
    """Drop SIDs that no item maps to, keeping order."""
    valid = {tuple(s) for s in catalog}
    kept = [(sid, s) for sid, s in result.candidates if sid in valid]
    return DecodeResult(
        candidates=kept,
        short=result.short,
        dropped=len(result.candidates) - len(kept),
    )


def all_sids(n: int, M: int) -> Iterable[SemanticId]:
    return itertools.product(range(M), repeat=n)
