"""Brute-force support: flip every subset of pairs and rerun the matcher.

Deliberately naive. It shares the matcher with production so that both
sides agree on what "optimal" means, and nothing else.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MatchedDesign, Sample, ValidationError
from .matcher import rematch_like
from .permuter import AssignmentDistribution, build_distribution
from .propensity import treated_probability

MAX_PAIRS = 22


class OracleSizeError(ValidationError):
    pass


@dataclass
class OracleReport:
    support: list[tuple[int, ...]]  # one bit per pair, 1 = swapped
    probabilities: np.ndarray
    same_structure: list[bool] = field(default_factory=list)
    designs: list[MatchedDesign] | None = None

    @property
    def size(self) -> int:
        return len(self.support)


def _flip_sample(sample: Sample, design: MatchedDesign, bits: tuple[int, ...]) -> Sample:
    swap = {u for (t, c), b in zip(design.pairs, bits) if b for u in (t, c)}
    units = tuple(u for u in sample.units)
    z = {u.id: (1 - u.treatment if u.id in swap else u.treatment) for u in units}
    return sample.with_treatments([z[u.id] for u in units])


def same_pairs(a: MatchedDesign, b: MatchedDesign) -> bool:
    """Same unordered pairs and same unmatched units."""
    pa = {frozenset(p) for p in a.pairs}
    pb = {frozenset(p) for p in b.pairs}
    return pa == pb and set(a.unmatched) == set(b.unmatched)


def is_still_optimal(design: MatchedDesign, redo: MatchedDesign) -> bool:
    """The original design is optimal for the flipped labels.

    Same number of pairs and no strictly smaller total distance. Labels do
    not change distances, so the original objective is what the original
    pairs would cost under the flipped assignment.
    """
    if redo.K != design.K:
        return False
    return redo.objective >= design.objective - 1e-12 * max(1.0, design.objective)


def brute_force_support(
    sample: Sample,
    design: MatchedDesign,
    prob_scores: Sample | dict | None = None,
    keep_designs: bool = False,
) -> OracleReport:
    """All within-pair flips for which the realized design remains optimal.

    The caliper and strata of ``design`` are reused. Probabilities are the
    products of within-pair treatment probabilities, renormalized over the
    support.
    """
    K = design.K
    if K > MAX_PAIRS:
        raise OracleSizeError(f"oracle is capped at {MAX_PAIRS} pairs, design has {K}")
    support, same, designs = [], [], []
    for mask in range(1 << K):
        bits = tuple((mask >> k) & 1 for k in range(K))
        redo = rematch_like(design, _flip_sample(sample, design, bits))
        if is_still_optimal(design, redo):
            support.append(bits)
            same.append(same_pairs(design, redo))
            if keep_designs:
                designs.append(redo)
    report = OracleReport(support, np.empty(0), same, designs if keep_designs else None)
    report.probabilities = exact_distribution(report, design, sample if prob_scores is None else prob_scores)
    return report


def exact_distribution(report: OracleReport, design: MatchedDesign, scores) -> np.ndarray:
    sm = {u.id: u.score for u in scores.units} if isinstance(scores, Sample) else scores
    p = treated_probability(
        np.array([sm[t] for t, _ in design.pairs]), np.array([sm[c] for _, c in design.pairs])
    )
    bits = np.array(report.support, dtype=bool).reshape(len(report.support), design.K)
    logw = np.where(bits, np.log1p(-p), np.log(p)).sum(axis=1)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def permuter_support(dist: AssignmentDistribution, cap: int = 1 << MAX_PAIRS) -> list[tuple[int, ...]]:
    flips, _ = dist.enumerate(cap)
    signs = dist.pair_signs(flips)
    return sorted(tuple(int(s < 0) for s in row) for row in signs)


@dataclass
class Agreement:
    agree: bool
    oracle_size: int
    permuter_size: int
    only_oracle: list[tuple[int, ...]]
    only_permuter: list[tuple[int, ...]]
    max_probability_gap: float

    def first_counterexample(self) -> tuple[str, tuple[int, ...]] | None:
        if self.only_oracle:
            return "missing from permuter", self.only_oracle[0]
        if self.only_permuter:
            return "missing from oracle", self.only_permuter[0]
        return None


def compare_with_permuter(sample: Sample, design: MatchedDesign, prob_scores=None) -> Agreement:
    report = brute_force_support(sample, design, prob_scores)
    dist = build_distribution(design, sample, prob_scores)
    flips, probs = dist.enumerate(1 << MAX_PAIRS)
    signs = dist.pair_signs(flips)
    perm = {tuple(int(s < 0) for s in row): float(p) for row, p in zip(signs, probs)}
    orc = {b: float(p) for b, p in zip(report.support, report.probabilities)}
    only_o = sorted(set(orc) - set(perm))
    only_p = sorted(set(perm) - set(orc))
    gap = max((abs(orc[b] - perm[b]) for b in set(orc) & set(perm)), default=0.0)
    return Agreement(not only_o and not only_p, len(orc), len(perm), only_o, only_p, gap)
