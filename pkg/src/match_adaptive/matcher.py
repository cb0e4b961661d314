"""Optimal pair matching on a univariate score.

Distances are ``|score_i - score_j|``. Outputs are canonicalised: once the
set of matched units is fixed, the pairing is the sorted (rank-to-rank)
pairing, which is cost-optimal and bottleneck-optimal on a line and never
contains a crossing match.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import MatchedDesign, Sample, ValidationError


class EmptyArmError(ValidationError):
    pass


@dataclass(frozen=True)
class MatchProblem:
    sample: Sample
    caliper: float | None = None
    strata_column: bool = False

    def __post_init__(self):
        if self.caliper is not None and not self.caliper > 0:
            raise ValidationError(f"caliper must be positive, got {self.caliper}")


def _arrays(sample: Sample) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids = sample.ids
    z = sample.z.astype(np.int64)
    s = sample.scores
    if np.isnan(s).any():
        missing = ids[int(np.flatnonzero(np.isnan(s))[0])]
        raise ValidationError("unit has no score", missing)
    if np.unique(s).size != s.size:
        raise ValidationError("scores are not distinct; run jitter_ties first")
    return ids, z, s


def _sorted_pairing(ids, s, used_t: np.ndarray, used_c: np.ndarray):
    """Rank-to-rank pairing of two equal-size index sets (indices into ids/s)."""
    t = used_t[np.argsort(s[used_t], kind="stable")]
    c = used_c[np.argsort(s[used_c], kind="stable")]
    return [(int(a), int(b)) for a, b in zip(t, c)]


def _build_design(ids, z, s, pairs_idx, caliper, stratum_of=None) -> MatchedDesign:
    matched = set()
    pairs = []
    # descending treated score gives a stable, human-readable order
    for a, b in sorted(pairs_idx, key=lambda ab: -s[ab[0]]):
        matched.update((a, b))
        pairs.append((ids[a], ids[b]))
    unmatched_idx = sorted((i for i in range(len(ids)) if i not in matched), key=lambda i: -s[i])
    unmatched = tuple((ids[i], int(z[i])) for i in unmatched_idx)
    objective = float(sum(abs(s[a] - s[b]) for a, b in pairs_idx))
    return MatchedDesign(tuple(pairs), unmatched, objective, caliper, stratum_of)


def _line_dp(s_sorted: np.ndarray, minority: np.ndarray) -> np.ndarray:
    """Choose which majority units to leave out so that the 1-d transport cost is minimal.

    ``minority`` flags the smaller arm along the sorted line. Returns a boolean
    mask (in sorted order) of majority units that are skipped. The cost of
    the rank pairing of the kept units equals ``sum_i gap_i * |open_i|``
    where ``open_i`` is the signed surplus of minority units left of gap i;
    the DP runs over the number of skips taken so far.
    """
    n = s_sorted.size
    n_min = int(minority.sum())
    S = n - 2 * n_min
    gaps = np.diff(s_sorted)
    V = np.full(S + 1, np.inf)
    V[0] = 0.0
    svec = np.arange(S + 1)
    maj_pos = np.flatnonzero(~minority)
    skip_choice = np.zeros((maj_pos.size, S + 1), dtype=bool)
    seen_min = 0
    seen_maj = 0
    m = 0
    for i in range(n):
        if minority[i]:
            seen_min += 1
        else:
            seen_maj += 1
            shifted = np.empty_like(V)
            shifted[0] = np.inf
            shifted[1:] = V[:-1]
            take_skip = shifted < V  # ties keep the unit
            skip_choice[m] = take_skip
            V = np.where(take_skip, shifted, V)
            m += 1
        if i < n - 1:
            V = V + gaps[i] * np.abs(seen_min - (seen_maj - svec))
    skipped = np.zeros(n, dtype=bool)
    s_left = S
    for m in range(maj_pos.size - 1, -1, -1):
        if s_left > 0 and skip_choice[m, s_left]:
            skipped[maj_pos[m]] = True
            s_left -= 1
    assert s_left == 0
    return skipped


def optimal_pair_match(problem: MatchProblem | Sample) -> MatchedDesign:
    """Minimum total score distance among matchings with ``min(#treated, #control)`` pairs."""
    sample = problem.sample if isinstance(problem, MatchProblem) else problem
    ids, z, s = _arrays(sample)
    n_t = int(z.sum())
    n_c = len(ids) - n_t
    if n_t == 0 or n_c == 0:
        raise EmptyArmError("matching needs at least one treated and one control unit")
    order = np.argsort(s, kind="stable")
    minority_arm = 1 if n_t <= n_c else 0
    minority = z[order] == minority_arm
    skipped_sorted = _line_dp(s[order], minority)
    skipped = np.zeros(len(ids), dtype=bool)
    skipped[order] = skipped_sorted
    used_t = np.flatnonzero((z == 1) & ~skipped)
    used_c = np.flatnonzero((z == 0) & ~skipped)
    return _build_design(ids, z, s, _sorted_pairing(ids, s, used_t, used_c), None)


def optimal_pair_match_caliper(problem: MatchProblem, caliper: float | None = None) -> MatchedDesign:
    """Maximum number of pairs within the caliper, then minimum total distance.

    Solved as a rectangular assignment problem with a per-pair bonus large
    enough that one extra pair always outweighs any distance saving.
    """
    if isinstance(problem, Sample):
        problem = MatchProblem(problem, caliper)
    c = problem.caliper if caliper is None else caliper
    if c is None:
        raise ValidationError("caliper matching needs a caliper")
    ids, z, s = _arrays(problem.sample)
    t_idx = np.flatnonzero(z == 1)
    c_idx = np.flatnonzero(z == 0)
    if t_idx.size == 0 or c_idx.size == 0:
        raise EmptyArmError("matching needs at least one treated and one control unit")
    d = np.abs(s[t_idx][:, None] - s[c_idx][None, :])
    feasible = d <= c
    bonus = (min(t_idx.size, c_idx.size) + 1) * min(c, 1.0) * 2.0 + 1.0
    cost = np.where(feasible, d - bonus, np.inf)
    # a dummy column per treated unit lets it stay unmatched at zero cost
    dummy = np.full((t_idx.size, t_idx.size), np.inf)
    np.fill_diagonal(dummy, 0.0)
    rows, cols = linear_sum_assignment(np.hstack([cost, dummy]))
    real = cols < c_idx.size
    used_t = t_idx[rows[real]]
    used_c = c_idx[cols[real]]
    pairs = _sorted_pairing(ids, s, used_t, used_c)
    assert all(abs(s[a] - s[b]) <= c for a, b in pairs)
    return _build_design(ids, z, s, pairs, c)


def match_within_strata(problem: MatchProblem) -> MatchedDesign:
    """Separate optimal matches per stratum, concatenated in sorted label order."""
    sample = problem.sample
    if sample.strata is None:
        raise ValidationError("sample has no strata labels")
    labels = np.array(sample.strata, dtype=object)
    stratum_of = {u.id: lab for u, lab in zip(sample.units, sample.strata)}
    pairs: list[tuple[str, str]] = []
    unmatched: list[tuple[str, int]] = []
    objective = 0.0
    for lab in sorted(set(sample.strata)):
        sub = Sample(tuple(u for u, l in zip(sample.units, labels) if l == lab))
        z = sub.z
        if z.sum() == 0 or z.sum() == len(z):
            unmatched += [
                (u.id, u.treatment) for u in sorted(sub.units, key=lambda u: -(u.score or 0.0))
            ]
            continue
        if problem.caliper is None:
            d = optimal_pair_match(sub)
        else:
            d = optimal_pair_match_caliper(MatchProblem(sub, problem.caliper))
        pairs += d.pairs
        unmatched += d.unmatched
        objective += d.objective
    return MatchedDesign(tuple(pairs), tuple(unmatched), objective, problem.caliper, stratum_of)


def match(problem: MatchProblem) -> MatchedDesign:
    """Dispatch on the problem's options."""
    if problem.strata_column:
        return match_within_strata(problem)
    if problem.caliper is not None:
        return optimal_pair_match_caliper(problem)
    return optimal_pair_match(problem)


def rematch_like(design: MatchedDesign, sample: Sample) -> MatchedDesign:
    """Re-run whichever matcher produced ``design`` on a (possibly permuted) sample."""
    if design.stratum_of is not None:
        strata = tuple(design.stratum_of[u.id] for u in sample.units)
        return match_within_strata(MatchProblem(Sample(sample.units, strata), design.caliper, True))
    return match(MatchProblem(sample, design.caliper))


def is_crossing(pair1: Sequence[float], pair2: Sequence[float]) -> bool:
    """Pairs are ``(score_treated, score_control)``."""
    t1, c1 = pair1
    t2, c2 = pair2
    return max(t1, c2) < min(c1, t2) or max(t2, c1) < min(c2, t1)
