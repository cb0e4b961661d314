import math
from itertools import combinations, permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sample
from match_adaptive.core import Sample, Unit, ValidationError, check_design
from match_adaptive.matcher import (
    EmptyArmError,
    MatchProblem,
    is_crossing,
    match,
    optimal_pair_match,
    optimal_pair_match_caliper,
    rematch_like,
)


def brute_force(sample, caliper=None):
    """(pairs, cost) maximising the number of pairs, then minimising distance."""
    s = {u.id: u.score for u in sample.units}
    t = [u.id for u in sample.units if u.treatment == 1]
    c = [u.id for u in sample.units if u.treatment == 0]
    best = (-1, math.inf)
    for k in range(min(len(t), len(c)), -1, -1):
        for ts in combinations(t, k):
            for cs in permutations(c, k):
                d = [abs(s[a] - s[b]) for a, b in zip(ts, cs)]
                if caliper is not None and any(x > caliper for x in d):
                    continue
                if (k, -sum(d)) > (best[0], -best[1]):
                    best = (k, sum(d))
        if best[0] == k or caliper is None:
            break
    return best


def test_golden_uncalipered(fig1):
    d = optimal_pair_match(fig1)
    assert set(d.pairs) == {("A", "E"), ("B", "G"), ("C", "H"), ("D", "I")}
    assert {u for u, _ in d.unmatched} == {"F", "J"}
    assert d.objective == pytest.approx(0.30)
    check_design(d, fig1)


def test_golden_caliper(fig1):
    d = optimal_pair_match_caliper(MatchProblem(fig1, 0.07))
    assert set(d.pairs) == {("B", "G"), ("C", "H"), ("D", "I")}
    assert {u for u, _ in d.unmatched} == {"A", "E", "F", "J"}
    assert d.objective == pytest.approx(0.15)


def test_matches_brute_force_small():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n_t = int(rng.integers(1, 5))
        n_c = int(rng.integers(1, 8))
        smp = random_sample(rng, n_t, n_c)
        d = optimal_pair_match(smp)
        k, cost = brute_force(smp)
        assert d.K == k
        assert d.objective == pytest.approx(cost, abs=1e-12)
        check_design(d, smp)


def test_caliper_matches_brute_force_small():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n_t = int(rng.integers(1, 5))
        n_c = int(rng.integers(1, 7))
        smp = random_sample(rng, n_t, n_c)
        cal = float(rng.uniform(0.02, 0.4))
        d = optimal_pair_match_caliper(MatchProblem(smp, cal))
        k, cost = brute_force(smp, cal)
        assert d.K == k
        assert d.objective == pytest.approx(cost, abs=1e-12)
        s = {u.id: u.score for u in smp.units}
        assert all(abs(s[a] - s[b]) <= cal for a, b in d.pairs)


def test_huge_caliper_equals_uncalipered():
    rng = np.random.default_rng(3)
    for _ in range(30):
        smp = random_sample(rng, 5, 9)
        a = optimal_pair_match(smp)
        b = optimal_pair_match_caliper(MatchProblem(smp, 2.0))
        assert a.pair_set() == b.pair_set()


def test_treated_majority_swaps_roles():
    rng = np.random.default_rng(4)
    smp = random_sample(rng, 8, 3)
    d = optimal_pair_match(smp)
    assert d.K == 3
    assert all(z == 1 for _, z in d.unmatched)
    assert d.objective == pytest.approx(brute_force(smp)[1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=4, max_size=30, unique=True), st.data())
def test_optimal_match_has_no_crossing(scores, data):
    z = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if sum(z) in (0, len(z)):
        return
    smp = Sample(tuple(Unit(f"u{i}", zz, None, (), s) for i, (zz, s) in enumerate(zip(z, scores))))
    d = optimal_pair_match(smp)
    sm = {u.id: u.score for u in smp.units}
    ps = [(sm[t], sm[c]) for t, c in d.pairs]
    for i in range(len(ps)):
        for j in range(i + 1, len(ps)):
            assert not is_crossing(ps[i], ps[j])


def test_is_crossing_predicate():
    assert is_crossing((0.5, 0.3), (0.35, 0.6))
    assert not is_crossing((0.5, 0.3), (0.6, 0.55))


def test_strata_are_matched_separately():
    rng = np.random.default_rng(5)
    smp = random_sample(rng, 6, 10, strata=3)
    d = match(MatchProblem(smp, None, True))
    lab = dict(zip(smp.ids, smp.strata))
    assert all(lab[t] == lab[c] for t, c in d.pairs)
    assert d.stratum_of == lab
    total = 0
    for g in sorted(set(smp.strata)):
        sub = Sample(tuple(u for u in smp.units if lab[u.id] == g))
        if 0 < sub.z.sum() < len(sub.units):
            total += optimal_pair_match(sub).K
    assert d.K == total


def test_single_arm_stratum_left_unmatched():
    units = (Unit("a", 1, 0.0, (), 0.3), Unit("b", 1, 0.0, (), 0.4), Unit("c", 1, 0.0, (), 0.5), Unit("d", 0, 0.0, (), 0.45))
    smp = Sample(units, ("x", "x", "y", "y"))
    d = match(MatchProblem(smp, None, True))
    assert d.pairs == (("c", "d"),)
    assert {u for u, _ in d.unmatched} == {"a", "b"}


def test_empty_arm_and_ties_rejected():
    units = (Unit("a", 1, 0.0, (), 0.3), Unit("b", 1, 0.0, (), 0.4))
    with pytest.raises(EmptyArmError):
        optimal_pair_match(Sample(units))
    tied = (Unit("a", 1, 0.0, (), 0.3), Unit("b", 0, 0.0, (), 0.3))
    with pytest.raises(ValidationError, match="distinct"):
        optimal_pair_match(Sample(tied))


def test_rematch_like_reproduces(fig1, fig1_design):
    assert rematch_like(fig1_design, fig1) == fig1_design


def test_negative_caliper_rejected(fig1):
    with pytest.raises(ValidationError):
        MatchProblem(fig1, -0.1)
