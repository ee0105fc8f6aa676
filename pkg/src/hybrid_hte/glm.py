"""Bernoulli GLM with logit link fitted by iteratively reweighted least squares."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, special

from .errors import (
    ConvergenceError,
    DomainError,
    SeparationError,
    SingularDesignError,
    ValidationError,
)

MAX_ITER = 100
COEF_TOL = 1e-8
SCORE_TOL = 1e-6
SEPARATION_BOUND = 30.0
RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class GlmFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    names: tuple = ()
    ridged: bool = False
    score: Optional[np.ndarray] = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def index(self, name: str) -> int:
        return self.names.index(name)


def log_likelihood(design: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _information(design, w):
    return design.T @ (design * w[:, None])


def _solve(h, g):
    try:
        c = linalg.cho_factor(h, check_finite=False)
        return linalg.cho_solve(c, g, check_finite=False), False
    except linalg.LinAlgError:
        h = h + RIDGE * np.eye(h.shape[0])
        try:
            c = linalg.cho_factor(h, check_finite=False)
        except linalg.LinAlgError:
            raise SingularDesignError("information matrix is singular even after ridge") from None
        return linalg.cho_solve(c, g, check_finite=False), True


def fit_logistic(design, y, names: Optional[Sequence[str]] = None, max_iter: int = MAX_ITER) -> GlmFit:
    """Maximum-likelihood logistic regression by IRLS (Newton with step-halving).

    Converges when the largest coefficient change is at most 1e-8 or the
    largest score component is at most 1e-6. The returned covariance is the
    inverse observed information at the optimum.

    Raises
    ------
    SingularDesignError
        The design is not of full column rank.
    SeparationError
        A coefficient exceeds 30 in absolute value during iteration.
    ConvergenceError
        ``max_iter`` reached; the non-converged fit is attached as ``.fit``.
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValidationError("design must be n x d and y length n")
    n, d = x.shape
    names = tuple(names) if names is not None else tuple(f"c{j}" for j in range(d))
    if len(names) != d:
        raise ValidationError("one name per design column is required")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("response must be 0/1")
    if d > n:
        raise SingularDesignError(f"{d} columns but only {n} rows")
    if np.linalg.matrix_rank(x) < d:
        raise SingularDesignError("design matrix is rank deficient")

    beta = np.zeros(d)
    ll = log_likelihood(x, y, beta)
    ridged = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = special.expit(x @ beta)
        score = x.T @ (y - mu)
        if np.max(np.abs(score)) <= SCORE_TOL:
            converged = True
            it -= 1
            break
        step, r = _solve(_information(x, mu * (1.0 - mu)), score)
        ridged |= r
        new_beta = beta + step
        new_ll = log_likelihood(x, y, new_beta)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step *= 0.5
            new_beta = beta + step
            new_ll = log_likelihood(x, y, new_beta)
            halvings += 1
        big = np.abs(new_beta) > SEPARATION_BOUND
        if big.any():
            j = int(np.argmax(np.abs(new_beta)))
            raise SeparationError(
                f"coefficient for {names[j]!r} diverged (|b| > {SEPARATION_BOUND:g}); "
                "the outcome is (quasi-)separated",
                column=names[j],
                beta=new_beta,
            )
        beta, ll = new_beta, new_ll
        if np.max(np.abs(step)) <= COEF_TOL:
            converged = True
            break

    mu = special.expit(x @ beta)
    h = _information(x, mu * (1.0 - mu))
    cov, r = _solve(h, np.eye(d))
    ridged |= r
    cov = 0.5 * (cov + cov.T)
    fit = GlmFit(beta, cov, ll, converged, it, names, ridged, x.T @ (y - mu))
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", fit=fit)
    return fit


def chisq_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square law, Q(df/2, x/2)."""
    if not (isinstance(df, (int, np.integer)) or float(df).is_integer()) or df < 1:
        raise DomainError(f"df must be a positive integer, got {df!r}")
    if not x >= 0:
        raise DomainError(f"chi-square statistic must be >= 0, got {x!r}")
    return float(special.gammaincc(0.5 * df, 0.5 * x))


def normal_sf(z):
    return special.ndtr(-np.asarray(z, dtype=float))
