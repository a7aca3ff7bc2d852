import itertools
import math

import numpy as np
import pytest
import torch
from conftest import random_context, tiny_model

from sidiff.decoding import (
    BeamBranch,
    DecodeResult,
    _expand,
    branch_space,
    cpd_decode,
    cpd_untruncated,
    exact_oracle,
    filter_to_catalog,
    fixed_order_beam,
    replay_score,
)
from sidiff.errors import ConfigError


def _state(model, rng, length=3):
    return model.encode([random_context(rng, model.cfg.n, model.cfg.M, length)])


def _factorized(seed, n=3, M=4):
    """Distributions fixed by the head bias alone, independent of every input."""
    model = tiny_model(seed=seed, n=n, M=M)
    with torch.no_grad():
        model.head_w.zero_()
    return model


def _brute_force_oracle(model, state, K):
    """Max over every fill order and codeword path, one decoder call per prefix."""
    n, M = model.cfg.n, model.cfg.M
    scores = {}
    for sid in itertools.product(range(M), repeat=n):
        best = -math.inf
        for order in itertools.permutations(range(n)):
            best = max(best, replay_score(model, state, [(k, sid[k]) for k in order]))
        scores[sid] = best
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:K]


class TestCpd:
    def test_factorized_top1_is_argmax(self, rng):
        model = _factorized(1)
        state = _state(model, rng)
        logp = torch.log_softmax(model.head_b, -1).detach().numpy()
        res = cpd_decode(model, state, B_act=8, K=5)
        sid, score = res.candidates[0]
        assert sid == tuple(int(v) for v in logp.argmax(-1))
        assert score == pytest.approx(float(logp.max(-1).sum()), abs=1e-12)

    def test_untruncated_matches_exact_oracle(self, rng):
        for seed in range(5):
            model = tiny_model(seed=seed)
            state = _state(model, rng)
            a = cpd_untruncated(model, state, K=10).candidates
            b = exact_oracle(model, state, K=10).candidates
            assert [s for s, _ in a] == [s for s, _ in b]
            assert np.allclose([v for _, v in a], [v for _, v in b], atol=1e-9, rtol=0)

    def test_output_invariants(self, rng):
        model = tiny_model(seed=4)
        state = _state(model, rng)
        res = cpd_decode(model, state, B_act=16, K=10)
        sids = res.sids
        assert len(set(sids)) == len(sids)
        scores = [s for _, s in res.candidates]
        assert all(a > b or (a == b and x < y) for (x, a), (y, b) in zip(res.candidates, res.candidates[1:]))
        for br in res.branches:
            assert br.complete and br.score <= 0
            assert sorted(k for k, _, _ in br.fills) == list(range(model.cfg.n))
            assert br.score == pytest.approx(sum(lp for _, _, lp in br.fills), abs=1e-12)
            assert replay_score(model, state, [(k, c) for k, c, _ in br.fills]) == pytest.approx(br.score, abs=1e-9)
        assert scores == sorted(scores, reverse=True)

    def test_short_result_flagged(self, rng):
        model = tiny_model(seed=2)
        res = cpd_decode(model, _state(model, rng), B_act=2, K=10)
        assert len(res) <= 2 and res.short

    def test_confidence_first_and_uniform_mask_ratio(self, rng):
        model = tiny_model(seed=7)
        state = _state(model, rng)
        n = model.cfg.n
        beam = [BeamBranch(tuple([-1] * n), 0.0)]
        logp = model.log_probs(torch.full((1, n), model.cfg.M), state)[0].detach().numpy()
        k, c = np.unravel_index(np.argmax(logp), logp.shape)
        for step in range(1, n + 1):
            beam = _expand(model, state, beam, 5, lambda br: br.masked)
            assert all(n - len(br.masked) == step for br in beam)
            if step == 1:
                assert any(br.slots[k] == c for br in beam)
                assert beam[0].fills[0][:2] == (int(k), int(c))

    def test_deterministic(self, rng):
        model = tiny_model(seed=9)
        state = _state(model, rng)
        assert cpd_decode(model, state, 4, 4).candidates == cpd_decode(model, state, 4, 4).candidates

    @pytest.mark.parametrize("B_act,K", [(0, 1), (1, 0)])
    def test_bad_widths(self, rng, B_act, K):
        model = tiny_model()
        with pytest.raises(ConfigError):
            cpd_decode(model, _state(model, rng), B_act, K)

    def test_single_history_required(self):
        model = tiny_model()
        with pytest.raises(ConfigError):
            cpd_decode(model, model.encode([[], []]), 2, 2)


class TestOracle:
    def test_matches_brute_force_over_orders(self, rng):
        model = tiny_model(seed=3, n=2, M=2)
        state = _state(model, rng)
        assert branch_space(2, 2) == 8
        got = exact_oracle(model, state, K=4).candidates
        want = _brute_force_oracle(model, state, K=4)
        assert [s for s, _ in got] == [s for s, _ in want]
        assert np.allclose([v for _, v in got], [v for _, v in want], atol=1e-12)

    def test_n3_brute_force(self, rng):
        model = tiny_model(seed=11, n=3, M=3)
        state = _state(model, rng)
        got = exact_oracle(model, state, K=27).candidates
        want = _brute_force_oracle(model, state, K=27)
        assert [s for s, _ in got] == [s for s, _ in want]

    def test_guard(self):
        model = tiny_model(n=5, M=16, d_m=10)
        with pytest.raises(ConfigError):
            exact_oracle(model, model.encode([[]]), 1)


class TestFixedOrder:
    def test_single_digit_equals_cpd(self, rng):
        model = tiny_model(seed=1, n=1, M=6, d_m=4)
        state = _state(model, rng)
        assert fixed_order_beam(model, state, [0], 3, 3).candidates == cpd_decode(model, state, 3, 3).candidates

    def test_factorized_same_top1(self, rng):
        model = _factorized(5)
        state = _state(model, rng)
        a = fixed_order_beam(model, state, [2, 0, 1], 4, 1).candidates[0]
        b = cpd_decode(model, state, 4, 1).candidates[0]
        assert a[0] == b[0] and a[1] == pytest.approx(b[1], abs=1e-12)

    def test_context_dependent_scores_differ(self, rng):
        differs = 0
        for seed in range(50):
            model = tiny_model(seed=seed)
            state = _state(model, rng)
            a = fixed_order_beam(model, state, [0, 1, 2], 4, 4).candidates
            b = cpd_decode(model, state, 4, 4).candidates
            differs += a != b
        assert differs > 0

    def test_bad_order(self, rng):
        model = tiny_model()
        with pytest.raises(ConfigError):
            fixed_order_beam(model, _state(model, rng), [0, 0, 1], 2, 2)


class TestCatalogFilter:
    def _result(self):
        return DecodeResult(candidates=[((0, 1), -0.1), ((1, 1), -0.5), ((2, 0), -0.9)])

    def test_empty_catalog(self):
        out = filter_to_catalog(self._result(), [])
        assert out.candidates == [] and out.dropped == 3

    def test_full_catalog(self):
        res = self._result()
        assert filter_to_catalog(res, res.sids).candidates == res.candidates

    def test_random_case_matches_linear_scan(self, rng):
        model = tiny_model(seed=12)
        res = cpd_untruncated(model, _state(model, rng), K=64)
        catalog = [tuple(int(v) for v in rng.integers(0, 4, 3)) for _ in range(20)]
        out = filter_to_catalog(res, catalog)
        expected = [(s, v) for s, v in res.candidates if any(s == c for c in catalog)]
        assert out.candidates == expected


def test_tsv_output():
    res = DecodeResult(candidates=[((0, 1), -0.25)])
    assert res.to_tsv({(0, 1): ["a", "b"]}) == "1\t-0.25\t0,1\ta,b\n"
