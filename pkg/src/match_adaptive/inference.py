"""Randomization tests and confidence intervals on a matched design.

Every statistic used here is linear in the pair signs: with ``s_k = +1``
for a pair kept as observed and ``-1`` for a swapped pair,

    T = (1/K) * sum_k s_k * (v_k - tau * u_k)

where ``v_k`` is the treated-minus-control difference of the (possibly
residualized) outcomes and ``u_k`` the same difference of the treatment
indicator (1 without regression adjustment). Null draws therefore only
need two weighted sums per draw, for any number of tau values.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .core import MatchedDesign, Sample, ValidationError
from .permuter import AssignmentDistribution, SupportTooLarge, build_distribution, independent_distribution
from .propensity import SingularDesignError, treated_probability

METHODS = ("uniform", "covariate-adaptive", "match-adaptive")
STATISTICS = ("diff-means", "regression")
EXACT_CAP = 10_000


@dataclass(frozen=True)
class TestSpec:
    statistic: str = "diff-means"
    method: str = "match-adaptive"
    sidedness: str = "greater"
    n_draws: int = 50_000
    exact: str = "auto"  # 'auto' | 'always' | 'never'
    alpha: float = 0.05
    tau: float = 0.0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ValidationError(f"unknown statistic {self.statistic!r}")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.sidedness not in ("greater", "less"):
            raise ValidationError(f"sidedness must be 'greater' or 'less', got {self.sidedness!r}")
        if self.exact not in ("auto", "always", "never"):
            raise ValidationError(f"exact must be auto, always or never, got {self.exact!r}")
        if self.n_draws < 1:
            raise ValidationError("n_draws must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")


@dataclass
class TestResult:
    observed: float
    null_mean: float
    p_value: float
    draws_used: int
    support_size: int | None
    exact: bool
    method: str = ""
    statistic: str = ""

    __test__ = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConfidenceInterval:
    lower: float | None
    upper: float | None
    contiguous: bool
    grid: np.ndarray = field(repr=False)
    accepted: np.ndarray = field(repr=False)

    @property
    def empty(self) -> bool:
        return self.lower is None

    def contains(self, tau: float) -> bool:
        return not self.empty and self.lower <= tau <= self.upper


# ---------------------------------------------------------------------------
# statistics


def _lookup(sample: Sample, design: MatchedDesign):
    idx = sample.index()
    t = np.array([idx[p[0]] for p in design.pairs], dtype=np.int64)
    c = np.array([idx[p[1]] for p in design.pairs], dtype=np.int64)
    return t, c


def _outcomes(sample: Sample, rows: np.ndarray) -> np.ndarray:
    y = sample.y[rows]
    if np.isnan(y).any():
        bad = sample.ids[int(rows[np.flatnonzero(np.isnan(y))[0]])]
        raise ValidationError("matched unit has no outcome", bad)
    return y


def pair_values(design: MatchedDesign, sample: Sample, statistic: str = "diff-means"):
    """``(v, u)``: per-pair outcome and treatment differences (treated minus control)."""
    t, c = _lookup(sample, design)
    rows = np.concatenate([t, c])
    y = _outcomes(sample, rows)
    K = design.K
    if statistic == "diff-means":
        return y[:K] - y[K:], np.ones(K)
    if statistic != "regression":
        raise ValidationError(f"unknown statistic {statistic!r}")
    X = sample.X[rows]
    A = np.column_stack([np.ones(rows.size), X])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise SingularDesignError("covariate matrix of matched units is rank deficient")
    zobs = np.concatenate([np.ones(K), np.zeros(K)])
    coef, *_ = np.linalg.lstsq(A, np.column_stack([y, zobs]), rcond=None)
    r = np.column_stack([y, zobs]) - A @ coef
    return r[:K, 0] - r[K:, 0], r[:K, 1] - r[K:, 1]


def diff_in_means(design: MatchedDesign, sample: Sample) -> float:
    v, _ = pair_values(design, sample, "diff-means")
    return float(v.mean())


def regression_adjusted_stat(design: MatchedDesign, sample: Sample) -> float:
    """Mean pair difference of OLS residuals (outcome on intercept and covariates)."""
    v, _ = pair_values(design, sample, "regression")
    return float(v.mean())


# ---------------------------------------------------------------------------
# null distributions


def _score_map(scores) -> Mapping[str, float]:
    if isinstance(scores, Sample):
        return {u.id: u.score for u in scores.units}
    return scores


def null_distribution(
    method: str,
    design: MatchedDesign,
    sample: Sample,
    prob_scores: Mapping[str, float] | Sample | None = None,
) -> AssignmentDistribution:
    """Uniform, covariate-adaptive or match-adaptive law of the pair swaps."""
    if method == "uniform":
        return independent_distribution(np.full(design.K, 0.5))
    sm = _score_map(sample)
    pm = sm if prob_scores is None else _score_map(prob_scores)
    for uid in (u for p in design.pairs for u in p):
        if pm.get(uid) is None or (method == "match-adaptive" and sm.get(uid) is None):
            raise ValidationError(f"{method} inference needs propensity scores", uid)
    if method == "covariate-adaptive":
        p = treated_probability(
            np.array([pm[t] for t, _ in design.pairs]), np.array([pm[c] for _, c in design.pairs])
        )
        return independent_distribution(1.0 - p)
    if method == "match-adaptive":
        return build_distribution(design, sm, pm)
    raise ValidationError(f"unknown method {method!r}")


def _tol(x) -> np.ndarray:
    return 1e-10 * np.maximum(1.0, np.abs(x))


def _tail(null: np.ndarray, obs, sidedness: str) -> np.ndarray:
    """Indicator of draws at least as extreme as ``obs`` (broadcast)."""
    if sidedness == "greater":
        return null >= obs - _tol(obs)
    return null <= obs + _tol(obs)


def _null_sums(dist: AssignmentDistribution, vu: np.ndarray, spec: TestSpec, seed: int):
    """``(sums, weights, exact, support_size)``; sums are ``(n, 2)``."""
    size = dist.support_size
    use_exact = spec.exact == "always" or (spec.exact == "auto" and size is not None and size <= EXACT_CAP)
    if use_exact:
        cap = EXACT_CAP if spec.exact == "auto" else max(EXACT_CAP, size or 0)
        try:
            sums, probs = dist.enumerate_linear(vu, cap=cap)
            return sums, probs, True, size
        except SupportTooLarge:
            if spec.exact == "always":
                raise
    return dist.draw_linear(vu, spec.n_draws, seed), None, False, size


def randomization_test(
    spec: TestSpec,
    design: MatchedDesign,
    sample: Sample,
    prob_scores: Mapping[str, float] | Sample | None = None,
    seed: int = 0,
    dist: AssignmentDistribution | None = None,
) -> TestResult:
    """One-sided randomization p-value of the sharp null ``Y(1) = Y(0) + tau``.

    Exact enumeration includes the observed assignment; Monte Carlo uses
    ``(1 + #{T >= t_obs}) / (1 + n_draws)``.
    """
    if design.K == 0:
        raise ValidationError("design has no pairs")
    v, u = pair_values(design, sample, spec.statistic)
    vu = np.column_stack([v, u])
    K = design.K
    obs = float((v.sum() - spec.tau * u.sum()) / K)
    dist = null_distribution(spec.method, design, sample, prob_scores) if dist is None else dist
    sums, probs, exact, size = _null_sums(dist, vu, spec, seed)
    null = (sums[:, 0] - spec.tau * sums[:, 1]) / K
    hit = _tail(null, obs, spec.sidedness)
    if exact:
        p = float(np.sum(probs[hit]))
        mean = float(probs @ null)
        used = int(null.size)
    else:
        p = (1.0 + float(hit.sum())) / (1.0 + null.size)
        mean = float(null.mean())
        used = int(null.size)
    return TestResult(obs, mean, min(p, 1.0), used, size, exact, spec.method, spec.statistic)


def default_tau_grid(design: MatchedDesign, sample: Sample, statistic: str = "diff-means", points: int = 201):
    v, u = pair_values(design, sample, statistic)
    center = float(v.sum() / u.sum()) if abs(u.sum()) > 1e-12 else float(v.mean())
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 1.0
    half = 4.0 * (sd if sd > 0 else 1.0)
    return np.linspace(center - half, center + half, points)


def confidence_interval(
    spec: TestSpec,
    design: MatchedDesign,
    sample: Sample,
    tau_grid: np.ndarray | None = None,
    prob_scores: Mapping[str, float] | Sample | None = None,
    seed: int = 0,
    sides: str = "two-sided",
    dist: AssignmentDistribution | None = None,
) -> ConfidenceInterval:
    """Grid inversion of the shifted-null test.

    ``sides='two-sided'`` keeps tau when both one-sided p-values exceed
    ``alpha / 2``; ``'greater'`` or ``'less'`` use a single tail at ``alpha``.
    All grid points share the same null draws.
    """
    grid = default_tau_grid(design, sample, spec.statistic) if tau_grid is None else np.asarray(tau_grid, float)
    if grid.size == 0:
        raise ValidationError("tau grid is empty")
    if np.any(np.diff(grid) < 0):
        raise ValidationError("tau grid must be sorted")
    v, u = pair_values(design, sample, spec.statistic)
    K = design.K
    dist = null_distribution(spec.method, design, sample, prob_scores) if dist is None else dist
    sums, probs, exact, _ = _null_sums(dist, np.column_stack([v, u]), spec, seed)
    obs = (v.sum() - grid * u.sum()) / K  # (G,)
    null = (sums[:, 0:1] - grid[None, :] * sums[:, 1:2]) / K  # (n, G)

    def pvals(side):
        hit = _tail(null, obs[None, :], side)
        if exact:
            return probs @ hit
        return (1.0 + hit.sum(axis=0)) / (1.0 + null.shape[0])

    if sides == "two-sided":
        keep = (pvals("greater") > spec.alpha / 2) & (pvals("less") > spec.alpha / 2)
    elif sides in ("greater", "less"):
        keep = pvals(sides) > spec.alpha
    else:
        raise ValidationError(f"unknown sides {sides!r}")
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return ConfidenceInterval(None, None, True, grid, keep)
    contiguous = bool(idx[-1] - idx[0] + 1 == idx.size)
    return ConfidenceInterval(float(grid[idx[0]]), float(grid[idx[-1]]), contiguous, grid, keep)
