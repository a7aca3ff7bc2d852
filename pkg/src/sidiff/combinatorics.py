"""Counting target-context supervision signals for left-to-right vs masked training.

A signal is one (target digit, masked set) pair: the digit is predicted with
exactly the digits outside the masked set visible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from sidiff.errors import ConfigError

MAX_N = 30
MAX_ENUM_N = 12


@dataclass(frozen=True)
class SignalCensus:
    n: int
    arm_signals: int
    mdm_signals: int
    min_samples_arm: int
    min_samples_mdm: int

    def to_text(self) -> str:
        return f"signals={self.mdm_signals} min_samples={self.min_samples_mdm}"


def count_signals(n: int) -> SignalCensus:
    if not 1 <= n <= MAX_N:
        raise ConfigError(f"n must be in [1, {MAX_N}], got {n}")
    return SignalCensus(
        n=n,
        arm_signals=n,
        mdm_signals=n * 2 ** (n - 1),
        min_samples_arm=1,
        min_samples_mdm=2**n - 1,
    )


def enumerate_signals(n: int) -> list[tuple[int, frozenset[int]]]:
    """Every (target, masked set) pair with the target inside a nonempty masked set.

    Ordered by mask size, then lexicographically by masked set, then target.
    """
    if not 1 <= n <= MAX_ENUM_N:
        raise ConfigError(f"enumeration supports 1 <= n <= {MAX_ENUM_N}, got {n}")
    out = []
    for m in range(1, n + 1):
        for subset in itertools.combinations(range(n), m):
            s = frozenset(subset)
            out.extend((k, s) for k in subset)
    return out


def arm_signals(n: int) -> list[tuple[int, frozenset[int]]]:
    """Teacher-forced left-to-right signals: digit k sees exactly its prefix."""
    return [(k, frozenset(range(k, n))) for k in range(n)]


def min_cover_size(n: int) -> int:
    """Smallest number of masking patterns that together provide every signal.

    Each pattern T provides the signals {(k, T) : k in T}.  A pattern that
    is the sole provider of some signal belongs to every cover, so the count
    of such patterns is a lower bound; a greedy cover gives an upper bound.
    The function insists the two agree, which makes the value exact.
    """
    if not 1 <= n <= MAX_ENUM_N:
        raise ConfigError(f"cover search supports 1 <= n <= {MAX_ENUM_N}, got {n}")
    patterns = [
        frozenset(c) for m in range(1, n + 1) for c in itertools.combinations(range(n), m)
    ]
    provides = {t: {(k, t) for k in t} for t in patterns}
    providers: dict[tuple[int, frozenset[int]], list[frozenset[int]]] = {}
    for t, sigs in provides.items():
        for sig in sigs:
            providers.setdefault(sig, []).append(t)
    required = {ps[0] for ps in providers.values() if len(ps) == 1}

    uncovered = set(providers)
    greedy = 0
    while uncovered:
        t = max(patterns, key=lambda p: len(provides[p] & uncovered))
        uncovered -= provides[t]
        greedy += 1
    if greedy != len(required):
        raise AssertionError(f"cover bounds disagree: {len(required)} <= min <= {greedy}")
    return greedy
