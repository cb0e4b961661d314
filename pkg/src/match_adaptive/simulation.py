"""Type I error study under the sharp null with two covariates.

Covariates are X1 ~ N(0, 5) and X2 ~ N(0, 1). Treatment follows a logit
model, linear or with extra ``log|X1|`` and ``X2^2`` terms; outcomes do not
depend on treatment. Each replication fits a logistic propensity model on
(X1, X2), matches on the estimated scores, and runs five one-sided tests:
uniform, covariate-adaptive and match-adaptive, the adaptive ones with
either estimated or true propensities.
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core import Sample, Unit, jitter_ties
from .inference import TestSpec, confidence_interval, randomization_test
from .matcher import MatchProblem, match
from .propensity import SeparationError, SingularDesignError, fit_logistic, predict

COLUMNS = ("uniform", "cov_adaptive_est", "cov_adaptive_true", "match_adaptive_est", "match_adaptive_true")


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    z_model: str = "linear"
    y_model: str = "linear"  # 'linear' | 'nonlinear' | 'constant'
    caliper: bool = False
    statistic: str = "diff-means"
    replications: int = 1000
    master_seed: int = 0
    n_draws: int = 1000
    alpha: float = 0.05
    effect: float = 0.0  # constant additive effect added to treated outcomes

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.z_model not in ("linear", "nonlinear"):
            raise ValueError(f"unknown z_model {self.z_model!r}")
        if self.y_model not in ("linear", "nonlinear", "constant"):
            raise ValueError(f"unknown y_model {self.y_model!r}")


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def true_logit(X1: np.ndarray, X2: np.ndarray, z_model: str) -> np.ndarray:
    if z_model == "linear":
        return 0.1 + 0.7 * X1 - 0.4 * X2
    return 0.2 + 0.7 * X1 - 0.4 * X2 + np.log(np.abs(X1)) - 0.5 * X2**2


def outcome_mean(X1: np.ndarray, X2: np.ndarray, y_model: str) -> np.ndarray:
    if y_model == "linear":
        return X1 + 2.0 * X2
    if y_model == "nonlinear":
        return 4.0 * np.abs(X1) ** 3 + 6.0 * np.sin(X1) + 2.0 * X2
    return np.zeros_like(X1)


def generate_dataset(config: SimConfig, rng: np.random.Generator) -> tuple[Sample, np.ndarray]:
    """Sample with covariates and outcomes, plus the true propensity scores."""
    n = config.n
    X1 = rng.normal(0.0, math.sqrt(5.0), n)
    X2 = rng.normal(0.0, 1.0, n)
    e = _expit(true_logit(X1, X2, config.z_model))
    z = (rng.random(n) < e).astype(int)
    eps = rng.normal(0.0, 1.0, n)
    if config.y_model == "constant":
        eps[:] = 0.0
    y = outcome_mean(X1, X2, config.y_model) + eps + config.effect * z
    units = tuple(
        Unit(f"u{i}", int(z[i]), float(y[i]), (float(X1[i]), float(X2[i]))) for i in range(n)
    )
    return Sample(units), np.clip(e, 1e-12, 1 - 1e-12)


@dataclass
class Replication:
    seed: int
    excluded: bool
    rejected: dict[str, bool]
    n_pairs: int = 0
    seconds: float = 0.0


def _prepare(config: SimConfig, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(config.master_seed, spawn_key=(seed,)))
    sample, e_true = generate_dataset(config, rng)
    model = fit_logistic(sample.X, sample.z)
    est = predict(model, sample.X)
    sample = jitter_ties(sample.with_scores(est))
    caliper = 0.2 * float(np.std(sample.scores, ddof=1)) if config.caliper else None
    design = match(MatchProblem(sample, caliper))
    true_map = {u.id: float(p) for u, p in zip(sample.units, e_true)}
    return sample, design, true_map, seed


def run_replication(config: SimConfig, seed: int) -> Replication:
    """One dataset, one match, five tests at level ``alpha``."""
    start = time.perf_counter()
    try:
        sample, design, true_map, _ = _prepare(config, seed)
    except (SeparationError, SingularDesignError):
        return Replication(seed, True, {})
    if design.K == 0:
        return Replication(seed, True, {})
    runs = {
        "uniform": ("uniform", None),
        "cov_adaptive_est": ("covariate-adaptive", None),
        "cov_adaptive_true": ("covariate-adaptive", true_map),
        "match_adaptive_est": ("match-adaptive", None),
        "match_adaptive_true": ("match-adaptive", true_map),
    }
    rejected = {}
    for j, (col, (method, probs)) in enumerate(runs.items()):
        spec = TestSpec(config.statistic, method, "greater", config.n_draws, "never", config.alpha)
        res = randomization_test(spec, design, sample, probs, seed=_test_seed(config, seed, j))
        rejected[col] = bool(res.p_value <= config.alpha)
    return Replication(seed, False, rejected, design.K, time.perf_counter() - start)


def _test_seed(config: SimConfig, seed: int, j: int) -> int:
    ss = np.random.SeedSequence(config.master_seed, spawn_key=(seed, 1 + j))
    return int(ss.generate_state(1, np.uint32)[0])


def run_ci_replication(config: SimConfig, seed: int, tau_star: float) -> bool | None:
    """Whether the two-sided match-adaptive interval (true propensities) covers ``tau_star``.

    ``config.effect`` should equal ``tau_star``. Returns None when excluded.
    """
    try:
        sample, design, true_map, _ = _prepare(config, seed)
    except (SeparationError, SingularDesignError):
        return None
    spec = TestSpec(config.statistic, "match-adaptive", "greater", config.n_draws, "never", config.alpha)
    ci = confidence_interval(spec, design, sample, prob_scores=true_map, seed=_test_seed(config, seed, 0))
    return ci.contains(tau_star)


def _map(fn, args, workers: int):
    if workers <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, *zip(*args)))


def default_workers() -> int:
    return int(os.environ.get("MATCH_ADAPTIVE_WORKERS", "1"))


@dataclass
class TableRow:
    config: SimConfig
    replications: int
    excluded: int
    rates: dict[str, float]
    ses: dict[str, float]


def simulate(config: SimConfig, workers: int | None = None) -> TableRow:
    w = default_workers() if workers is None else workers
    reps = _map(run_replication, [(config, r) for r in range(config.replications)], w)
    kept = [r for r in reps if not r.excluded]
    rates, ses = {}, {}
    for col in COLUMNS:
        n = len(kept)
        p = sum(r.rejected[col] for r in kept) / n if n else float("nan")
        rates[col] = p
        ses[col] = math.sqrt(p * (1 - p) / n) if n else float("nan")
    return TableRow(config, len(kept), len(reps) - len(kept), rates, ses)


def type_one_error_table(configs: list[SimConfig], workers: int | None = None) -> list[TableRow]:
    return [simulate(c, workers) for c in configs]


def table_csv(rows: list[TableRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["y_model", "z_model", "caliper", "statistic", "replications", "excluded"]
        + [c for col in COLUMNS for c in (col, f"{col}_se")]
    )
    for r in rows:
        c = r.config
        w.writerow(
            [c.y_model, c.z_model, int(c.caliper), c.statistic, r.replications, r.excluded]
            + [f"{v:.4f}" for col in COLUMNS for v in (r.rates[col], r.ses[col])]
        )
    return buf.getvalue()


def table_two_configs(base: SimConfig) -> list[SimConfig]:
    """The 16 cells: outcome model x treatment model x caliper x regression."""
    out = []
    for y in ("linear", "nonlinear"):
        for zm in ("linear", "nonlinear"):
            for cal in (False, True):
                for stat in ("diff-means", "regression"):
                    out.append(replace(base, y_model=y, z_model=zm, caliper=cal, statistic=stat))
    return out


def config_dict(config: SimConfig) -> dict:
    return asdict(config)
