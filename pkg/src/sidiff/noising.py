"""Training-view construction.

A view is a set of masked digit positions.  The on-policy coherent builder
probes the decoder once on an all-mask input, ranks digits from least to
most confident and masks a growing prefix of that ranking, so every view
contains the previous one.  The other builders exist for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from sidiff.errors import ConfigError
from sidiff.network import EncoderState, SidDiffusionModel


@dataclass(frozen=True)
class DifficultyProfile:
    p_max: np.ndarray
    delta: np.ndarray
    sigma: tuple[int, ...]  # hardest -> easiest

    @classmethod
    def from_probs(cls, probs: np.ndarray, policy: str = "least") -> "DifficultyProfile":
        p_max = np.asarray(probs, dtype=np.float64).max(axis=-1)
        delta = 1.0 - p_max
        return cls(p_max=p_max, delta=delta, sigma=rank_digits(delta, policy))


@dataclass(frozen=True)
class MaskView:
    masked: frozenset[int]
    n: int

    @property
    def m(self) -> int:
        return len(self.masked)

    @property
    def t(self) -> float:
        return self.m / self.n

    def row(self) -> list[int]:
        return [int(k in self.masked) for k in range(self.n)]


@dataclass(frozen=True)
class ViewSchedule:
    views: tuple[MaskView, ...]
    n: int

    def __len__(self) -> int:
        return len(self.views)

    @property
    def matrix(self) -> np.ndarray:
        """Binary R x n view matrix, one row per view."""
        return np.array([v.row() for v in self.views], dtype=np.int8).reshape(len(self.views), self.n)

    def is_nested(self) -> bool:
        return all(a.masked < b.masked for a, b in zip(self.views, self.views[1:]))

    def to_text(self) -> str:
        return "".join("".join(map(str, v.row())) + "\n" for v in self.views)

    @classmethod
    def from_text(cls, text: str) -> "ViewSchedule":
        rows = [line.strip() for line in text.splitlines() if line.strip()]
        n = len(rows[0]) if rows else 0
        views = tuple(MaskView(frozenset(k for k, c in enumerate(r) if c == "1"), n) for r in rows)
        return cls(views=views, n=n)

    @classmethod
    def from_order(cls, order: Sequence[int], schedule: Sequence[int], n: int) -> "ViewSchedule":
        return cls(views=tuple(MaskView(frozenset(order[:m]), n) for m in schedule), n=n)


def rank_digits(delta: Sequence[float], policy: str = "least") -> tuple[int, ...]:
    """Digit order for masking; ties keep ascending digit index.

    ``least`` puts the least confident (largest delta) digit first,
    ``most`` the most confident one.
    """
    if policy not in ("least", "most"):
        raise ConfigError(f"unknown selection policy {policy!r}")
    sign = -1.0 if policy == "least" else 1.0
    return tuple(sorted(range(len(delta)), key=lambda k: (sign * float(delta[k]), k)))


def default_schedule(n: int) -> list[int]:
    return list(range(1, n + 1))


def check_schedule(schedule: Sequence[int], n: int) -> None:
    if not schedule:
        raise ConfigError("mask schedule is empty")
    if schedule[0] < 1 or schedule[-1] > n:
        raise ConfigError(f"mask counts must lie in [1, {n}], got {list(schedule)}")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigError(f"mask schedule must be strictly increasing, got {list(schedule)}")


def _fully_masked(model: SidDiffusionModel, batch: int) -> torch.Tensor:
    return torch.full((batch, model.cfg.n), model.cfg.mask_token, dtype=torch.long)


@torch.no_grad()
def probe_probs(model: SidDiffusionModel, state: EncoderState) -> np.ndarray:
    """Decoder distributions on an all-mask input, shape (B, n, M)."""
    return model.decode_digits(_fully_masked(model, len(state)), state).double().numpy()


def probe_difficulty(model: SidDiffusionModel, state: EncoderState) -> DifficultyProfile:
    """Difficulty profile of a single encoded history."""
    if len(state) != 1:
        raise ConfigError("probe_difficulty expects a single-history encoder state")
    return DifficultyProfile.from_probs(probe_probs(model, state)[0])


def build_ocn_views(profile: DifficultyProfile, schedule: Sequence[int]) -> ViewSchedule:
    n = len(profile.delta)
    check_schedule(schedule, n)
    return ViewSchedule.from_order(profile.sigma, schedule, n)


def build_ocn_views_stochastic(
    profile: DifficultyProfile, schedule: Sequence[int], seed: int
) -> ViewSchedule:
    """Sample digits without replacement with probability proportional to delta."""
    n = len(profile.delta)
    check_schedule(schedule, n)
    rng = np.random.default_rng(seed)
    weights = np.clip(np.asarray(profile.delta, dtype=np.float64), 0.0, None)
    remaining = list(range(n))
    order: list[int] = []
    for _ in range(schedule[-1]):
        w = weights[remaining]
        p = w / w.sum() if w.sum() > 0 else np.full(len(remaining), 1.0 / len(remaining))
        pick = remaining[int(rng.choice(len(remaining), p=p))]
        order.append(pick)
        remaining.remove(pick)
    return ViewSchedule.from_order(order, schedule, n)


def build_random_views(n: int, R: int, seed: int) -> ViewSchedule:
    """Independent views: size uniform on 1..n, then a uniform subset of that size."""
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(R):
        m = int(rng.integers(1, n + 1))
        views.append(MaskView(frozenset(int(k) for k in rng.choice(n, size=m, replace=False)), n))
    return ViewSchedule(views=tuple(views), n=n)


def build_fixed_coherent_views(
    n: int, R: int, seed: int, k: int = 1, schedule: Sequence[int] | None = None
) -> ViewSchedule:
    """``k`` nested chains, each along its own random digit permutation."""
    schedule = list(schedule) if schedule is not None else default_schedule(n)[:R]
    if len(schedule) != R:
        raise ConfigError(f"schedule length {len(schedule)} != R={R}")
    check_schedule(schedule, n)
    rng = np.random.default_rng(seed)
    views: list[MaskView] = []
    for _ in range(k):
        perm = [int(v) for v in rng.permutation(n)]
        views.extend(ViewSchedule.from_order(perm, schedule, n).views)
    return ViewSchedule(views=tuple(views), n=n)


@torch.no_grad()
def refresh_order(
    model: SidDiffusionModel, state: EncoderState, target: Sequence[int], policy: str
) -> tuple[int, ...]:
    """Masking order re-estimated after every reveal.

    Starting from the all-mask input, each decoder call ranks the still
    masked digits and reveals (fills with the true value) the one that
    would come last in the static order.  The masking order is the reverse
    of the reveal order.
    """
    n, mask = model.cfg.n, model.cfg.mask_token
    slots = [mask] * n
    remaining = list(range(n))
    reveals: list[int] = []
    for _ in range(n):
        probs = model.decode_digits(torch.tensor([slots]), state)[0].double().numpy()
        delta = 1.0 - probs.max(axis=-1)
        ranked = [k for k in rank_digits(delta, policy) if k in remaining]
        last = ranked[-1]
        reveals.append(last)
        remaining.remove(last)
        slots[last] = int(target[last])
    return tuple(reversed(reveals))


def ocn_variant(
    profile: DifficultyProfile,
    schedule: Sequence[int],
    policy: str,
    refresh: str,
    model: SidDiffusionModel | None = None,
    state: EncoderState | None = None,
    target: Sequence[int] | None = None,
) -> ViewSchedule:
    """The four selection-policy x refresh-frequency variants.

    ``least``/``static`` is exactly :func:`build_ocn_views`.
    """
    n = len(profile.delta)
    check_schedule(schedule, n)
    if refresh == "static":
        return ViewSchedule.from_order(rank_digits(profile.delta, policy), schedule, n)
    if refresh != "refresh":
        raise ConfigError(f"unknown refresh mode {refresh!r}")
    if model is None or state is None or target is None:
        raise ConfigError("refresh variants need the model, encoder state and target")
    return ViewSchedule.from_order(refresh_order(model, state, target, policy), schedule, n)


# -- batched builders used by the trainer ----------------------------------


def orders_to_masks(orders: np.ndarray, schedule: Sequence[int]) -> np.ndarray:
    """(B, n) digit orders -> (B, R, n) boolean masks for a nested schedule."""
    B, n = orders.shape
    rank = np.empty_like(orders)
    rank[np.arange(B)[:, None], orders] = np.arange(n)[None, :]
    m = np.asarray(schedule)[None, :, None]
    return rank[:, None, :] < m


def batch_static_orders(probs: np.ndarray, policy: str) -> np.ndarray:
    """Vectorized :func:`rank_digits` over a (B, n, M) probe."""
    delta = 1.0 - probs.max(axis=-1)
    key = -delta if policy == "least" else delta
    return np.argsort(key, axis=1, kind="stable")


@torch.no_grad()
def batch_refresh_orders(
    model: SidDiffusionModel, state: EncoderState, targets: torch.Tensor, policy: str
) -> np.ndarray:
    """Vectorized :func:`refresh_order`; n decoder calls for the whole batch."""
    B, n = targets.shape
    mask = model.cfg.mask_token
    slots = torch.full((B, n), mask, dtype=torch.long)
    revealed = np.zeros((B, n), dtype=bool)
    reveals = np.empty((B, n), dtype=np.int64)
    rows = np.arange(B)
    for step in range(n):
        probs = model.decode_digits(slots, state).double().numpy()
        delta = 1.0 - probs.max(axis=-1)
        key = -delta if policy == "least" else delta
        # among unrevealed digits pick the last in (key, index) order
        order = np.argsort(key, axis=1, kind="stable")
        pos = np.empty_like(order)
        pos[rows[:, None], order] = np.arange(n)[None, :]
        pos = np.where(revealed, -1, pos)
        last = pos.argmax(axis=1)
        reveals[:, step] = last
        revealed[rows, last] = True
        slots[rows, last] = targets[rows, last]
    return reveals[:, ::-1].copy()


def batch_random_masks(B: int, n: int, R: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((B, R, n), dtype=bool)
    for b in range(B):
        seed = int(rng.integers(2**63))
        out[b] = build_random_views(n, R, seed).matrix.astype(bool)
    return out


def batch_coherent_masks(
    B: int, n: int, schedule: Sequence[int], k: int, rng: np.random.Generator
) -> np.ndarray:
    out = np.zeros((B, len(schedule) * k, n), dtype=bool)
    for b in range(B):
        seed = int(rng.integers(2**63))
        out[b] = build_fixed_coherent_views(n, len(schedule), seed, k, schedule).matrix.astype(bool)
    return out


def batch_stochastic_masks(
    probs: np.ndarray, schedule: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    out = np.zeros((probs.shape[0], len(schedule), probs.shape[1]), dtype=bool)
    for b in range(probs.shape[0]):
        prof = DifficultyProfile.from_probs(probs[b])
        out[b] = build_ocn_views_stochastic(prof, schedule, int(rng.integers(2**63))).matrix.astype(bool)
    return out
