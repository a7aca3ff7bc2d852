import itertools

import pytest

from sidiff.combinatorics import arm_signals, count_signals, enumerate_signals, min_cover_size
from sidiff.errors import ConfigError


def test_n4_census():
    c = count_signals(4)
    assert (c.mdm_signals, c.min_samples_mdm) == (32, 15)
    assert c.to_text() == "signals=32 min_samples=15"


def test_n1_census():
    c = count_signals(1)
    assert c.arm_signals == c.mdm_signals == c.min_samples_mdm == 1


def test_n3_signals():
    assert count_signals(3).mdm_signals == 12
    assert len(enumerate_signals(3)) == 12


def test_n2_hand_enumeration():
    expected = {(0, frozenset({0})), (1, frozenset({1})), (0, frozenset({0, 1})), (1, frozenset({0, 1}))}
    assert set(enumerate_signals(2)) == expected and len(enumerate_signals(2)) == 4


def test_n1_enumeration():
    assert enumerate_signals(1) == [(0, frozenset({0}))]


@pytest.mark.parametrize("n", range(1, 13))
def test_enumeration_matches_closed_form(n):
    signals = enumerate_signals(n)
    census = count_signals(n)
    assert len(signals) == len(set(signals)) == census.mdm_signals
    arm = arm_signals(n)
    assert len(arm) == census.arm_signals == n
    assert set(arm) <= set(signals)


@pytest.mark.parametrize("n", range(1, 6))
def test_min_cover_by_exhaustive_search(n):
    patterns = [frozenset(c) for m in range(1, n + 1) for c in itertools.combinations(range(n), m)]
    need = set(enumerate_signals(n))

    def covers(pick):
        return {(k, t) for t in pick for k in t} >= need

    assert covers(patterns)
    # coverage is monotone under inclusion, so if no set missing one pattern
    # covers, no smaller set does either and the full set is minimal
    assert not any(covers(pick) for pick in itertools.combinations(patterns, len(patterns) - 1))
    assert min_cover_size(n) == len(patterns) == count_signals(n).min_samples_mdm


@pytest.mark.parametrize("n", [0, 31])
def test_range(n):
    with pytest.raises(ConfigError):
        count_signals(n)


def test_enumeration_guard():
    with pytest.raises(ConfigError):
        enumerate_signals(13)
