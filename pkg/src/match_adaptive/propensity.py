"""Propensity model fitting and within-pair assignment probabilities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

CLAMP = 1e-12


class SeparationError(ArithmeticError):
    """Fitted probabilities collapse to 0/1 while coefficients diverge."""


class SingularDesignError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PropensityModel:
    coefficients: tuple[float, ...]  # intercept first
    converged: bool
    iterations: int

    @property
    def p(self) -> int:
        return len(self.coefficients) - 1

    def to_text(self) -> str:
        lines = [f"converged {int(self.converged)}", f"iterations {self.iterations}"]
        lines += [f"beta{j} {c!r}" for j, c in enumerate(self.coefficients)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PropensityModel":
        fields = dict(line.split(None, 1) for line in text.strip().splitlines())
        coefs = []
        j = 0
        while f"beta{j}" in fields:
            coefs.append(float(fields[f"beta{j}"]))
            j += 1
        return cls(tuple(coefs), bool(int(fields["converged"])), int(fields["iterations"]))


@dataclass(frozen=True)
class PairProbabilities:
    p1: float
    p2: float


def _expit(eta: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _loglik(y: np.ndarray, eta: np.ndarray) -> float:
    # log(1 + e^eta) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(
    covariates: np.ndarray,
    treatment: Sequence[int],
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Maximum-likelihood logistic regression by IRLS with step halving.

    Convergence is declared when every component of the score equation
    ``X^T (z - p)`` is below ``tol`` in absolute value.
    """
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(treatment, dtype=float)
    n, p = X.shape
    if n <= p + 1:
        raise ValueError(f"need more than {p + 1} observations, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates contain non-finite values")
    A = np.column_stack([np.ones(n), X])
    beta = np.zeros(p + 1)
    ybar = y.mean()
    if 0.0 < ybar < 1.0:
        beta[0] = np.log(ybar / (1.0 - ybar))
    eta = A @ beta
    ll = _loglik(y, eta)
    for it in range(1, max_iter + 1):
        mu = _expit(eta)
        grad = A.T @ (y - mu)
        if np.max(np.abs(grad)) < tol:
            return PropensityModel(tuple(float(b) for b in beta), True, it - 1)
        w = mu * (1.0 - mu)
        H = A.T @ (A * w[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            _raise_degenerate(mu, beta)
            raise SingularDesignError("weighted design matrix is singular") from None
        if not np.all(np.isfinite(step)):
            raise SingularDesignError("weighted design matrix is singular")
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = A @ cand
            ll_c = _loglik(y, eta_c)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, eta, ll = cand, eta_c, ll_c
        _raise_degenerate(_expit(eta), beta)
    mu = _expit(eta)
    grad = A.T @ (y - mu)
    return PropensityModel(tuple(float(b) for b in beta), bool(np.max(np.abs(grad)) < tol), max_iter)


def _raise_degenerate(mu: np.ndarray, beta: np.ndarray) -> None:
    extreme = (mu < 1e-10) | (mu > 1.0 - 1e-10)
    if extreme.any() and np.max(np.abs(beta)) > 15.0:
        raise SeparationError("separation detected: fitted probabilities reached 0 or 1")


def predict(model: PropensityModel, covariates: Sequence[float] | np.ndarray) -> float | np.ndarray:
    """Inverse logit of the linear predictor, clamped to ``[1e-12, 1 - 1e-12]``.

    A 1-d input of length ``p`` gives a float; an ``(n, p)`` array gives a vector.
    """
    x = np.asarray(covariates, dtype=float)
    beta = np.asarray(model.coefficients)
    if x.ndim == 1:
        if x.shape[0] != model.p:
            raise ValueError(f"expected {model.p} covariates, got {x.shape[0]}")
        eta = beta[0] + x @ beta[1:]
        return float(np.clip(_expit(eta), CLAMP, 1.0 - CLAMP))
    if x.shape[1] != model.p:
        raise ValueError(f"expected {model.p} covariates, got {x.shape[1]}")
    return np.clip(_expit(beta[0] + x @ beta[1:]), CLAMP, 1.0 - CLAMP)


def odds(score: float | np.ndarray) -> float | np.ndarray:
    return score / (1.0 - score)


def pair_probabilities(score1: float, score2: float) -> PairProbabilities:
    """Probability that each unit of a pair is the treated one, given one is treated."""
    for s in (score1, score2):
        if not (0.0 < s < 1.0):
            raise ValueError(f"score {s!r} must lie strictly inside (0, 1)")
    e1, e2 = odds(score1), odds(score2)
    p1 = e1 / (e1 + e2)
    return PairProbabilities(p1, 1.0 - p1)


def treated_probability(score_treated: np.ndarray, score_control: np.ndarray) -> np.ndarray:
    """Vectorised ``p1`` for pairs listed as (observed treated, observed control)."""
    et, ec = odds(np.asarray(score_treated)), odds(np.asarray(score_control))
    return et / (et + ec)
