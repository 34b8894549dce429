"""Significance tests for bias effects on classification accuracy.

Participant records are analyzed with a fixed-effects logistic
regression, accuracy against block, label bias, domain bias, and all
pairwise interactions, fitted by iteratively reweighted least squares.
Repeated classifications of the same object are correlated, so effect
tests use a by-object cluster-robust (sandwich) covariance instead of a
random intercept; Wald chi-square statistics per term group give the
analysis-of-deviance table.

Everything here is plain numerics on purpose: the fitting loop, the
sandwich assembly, and the chi-square tail are all small enough that
owning them outright beats importing a modeling stack, and the test
suite pins each one against independent oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .model import BiasClass

BIAS_REFERENCE = BiasClass.NONE.value
MAX_ABS_COEF = 30.0
GRAD_TOL = 1e-9
MAX_ITER = 100

# term name -> design column indices, in table order
EFFECTS = (
    ("Block", (1,)),
    ("Label Bias", (2, 3)),
    ("Domain Bias", (4, 5)),
    ("block:Label", (6, 7)),
    ("block:Domain", (8, 9)),
    ("Label:Domain", (10, 11, 12, 13)),
)

ANOVA_COLUMNS = ["effect", "df", "wald_chi2", "p_value"]


class RankDeficiencyError(ValueError):
    """Design matrix has linearly dependent columns."""


class SeparationError(RuntimeError):
    """Perfectly separated response: coefficients diverge."""


@dataclass(frozen=True)
class DesignMatrix:
    """Expanded regression design for the accuracy model.

    Columns, in order: intercept; block centered at its sample mean;
    treatment-coded label-bias dummies (reference level none, dummy
    order right then wrong); domain-bias dummies likewise; block x
    label, block x domain, and label x domain interaction products.
    column_names records that ordering; clusters carries the object id
    of each row for robust-covariance grouping.
    """

    matrix: np.ndarray
    column_names: tuple
    clusters: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.column_names):
            raise ValueError("matrix and column_names disagree")
        if self.clusters.shape != (self.matrix.shape[0],):
            raise ValueError("clusters must align with the design rows")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class FitResult:
    """Maximum-likelihood logistic fit with its covariance estimates."""

    coef: np.ndarray
    model_cov: np.ndarray
    log_likelihood: float
    converged: bool
    n_iter: int
    robust_cov: np.ndarray | None = field(default=None, repr=False)


def _dummy_levels() -> tuple:
    return tuple(b.value for b in BiasClass if b.value != BIAS_REFERENCE)


def encode_design(records: pd.DataFrame) -> DesignMatrix:
    """Expand participant records into the 14-column accuracy design.

    Requires at least two observed levels of block, label bias, and
    domain bias; a single-level factor would leave its columns zero.
    """
    required = ["block", "label_bias", "domain_bias", "object"]
    missing = [c for c in required if c not in records.columns]
    if missing:
        raise ValueError(f"records miss required columns: {missing}")

    if records["block"].nunique() < 2:
        raise RankDeficiencyError(
            "factor 'block' has a single level; "
            "its design columns would be rank deficient"
        )
    all_levels = tuple(b.value for b in BiasClass)
    for factor in ("label_bias", "domain_bias"):
        observed = set(records[factor])
        absent = [lev for lev in all_levels if lev not in observed]
        if absent:
            raise RankDeficiencyError(
                f"factor '{factor.removesuffix('_bias')}' misses levels "
                f"{absent}; the fixed design needs every bias class"
            )

    block = records["block"].to_numpy(dtype=float)
    block_c = block - block.mean()
    n = len(records)
    levels = _dummy_levels()

    cols = [np.ones(n), block_c]
    names = ["intercept", "block_c"]
    for prefix, column in (("label", "label_bias"), ("domain", "domain_bias")):
        values = records[column].to_numpy()
        for lev in levels:
            cols.append((values == lev).astype(float))
            names.append(f"{prefix}_{lev}")

    label_cols = {name: cols[i] for i, name in enumerate(names) if name.startswith("label_")}
    domain_cols = {name: cols[i] for i, name in enumerate(names) if name.startswith("domain_")}
    for name, col in label_cols.items():
        cols.append(block_c * col)
        names.append(f"block_c:{name}")
    for name, col in domain_cols.items():
        cols.append(block_c * col)
        names.append(f"block_c:{name}")
    for lname, lcol in label_cols.items():
        for dname, dcol in domain_cols.items():
            cols.append(lcol * dcol)
            names.append(f"{lname}:{dname}")

    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficiencyError("design matrix is rank deficient")
    return DesignMatrix(
        matrix=X,
        column_names=tuple(names),
        clusters=records["object"].to_numpy(),
    )


def _as_matrix(X) -> np.ndarray:
    return X.matrix if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_likelihood(eta: np.ndarray, y: np.ndarray) -> float:
    # sum y*eta - log(1+exp(eta)), stable for large |eta|
    return float((y * eta - (np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta))))).sum())


def irls_fit(X, y: np.ndarray) -> FitResult:
    """Fit logistic regression by iteratively reweighted least squares.

    Newton steps on the log likelihood until the score vector
    X'(y - p) has infinity norm below 1e-9 (at most 100 iterations;
    short of that the result is returned with converged=False).

    Raises
    ------
    RankDeficiencyError
        If the design columns are linearly dependent.
    SeparationError
        If coefficients diverge past +-30, the fingerprint of a
        perfectly separated response.
    """
    M = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if y.shape != (M.shape[0],):
        raise ValueError("y must be one value per design row")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("y must be binary")
    if np.linalg.matrix_rank(M) < M.shape[1]:
        raise RankDeficiencyError("design matrix is rank deficient")

    beta = np.zeros(M.shape[1])
    converged = False
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        eta = M @ beta
        p_hat = _sigmoid(eta)
        score = M.T @ (y - p_hat)
        if float(np.abs(score).max()) < GRAD_TOL:
            converged = True
            break
        w = np.clip(p_hat * (1.0 - p_hat), 1e-10, None)
        hess = M.T @ (M * w[:, None])
        beta = beta + np.linalg.solve(hess, score)
        if float(np.abs(beta).max()) > MAX_ABS_COEF:
            raise SeparationError(
                "coefficients diverged beyond +-30; response is separated"
            )

    eta = M @ beta
    p_hat = _sigmoid(eta)
    w = np.clip(p_hat * (1.0 - p_hat), 1e-10, None)
    info = M.T @ (M * w[:, None])
    model_cov = np.linalg.inv(info)
    return FitResult(
        coef=beta,
        model_cov=0.5 * (model_cov + model_cov.T),
        log_likelihood=_log_likelihood(eta, y),
        converged=converged,
        n_iter=n_iter,
    )


def sandwich_cov(X, y: np.ndarray, fit: FitResult, clusters: np.ndarray) -> np.ndarray:
    """Cluster-robust covariance of the logistic coefficients.

    Bread is the inverse Fisher information at the fit; meat is the
    outer-product sum of per-cluster score totals, which stays valid
    under arbitrary correlation of rows inside a cluster.
    """
    M = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    clusters = np.asarray(clusters)
    if clusters.shape != (M.shape[0],):
        raise ValueError("clusters must align with the design rows")
    if len(np.unique(clusters)) < 2:
        raise ValueError("need at least 2 clusters for a robust covariance")
    if not fit.converged:
        raise ValueError("robust covariance requires a converged fit")

    p_hat = _sigmoid(M @ fit.coef)
    w = np.clip(p_hat * (1.0 - p_hat), 1e-10, None)
    bread = np.linalg.inv(M.T @ (M * w[:, None]))

    scores = M * (y - p_hat)[:, None]
    _, inverse = np.unique(clusters, return_inverse=True)
    sums = np.zeros((inverse.max() + 1, M.shape[1]))
    np.add.at(sums, inverse, scores)
    meat = sums.T @ sums

    cov = bread @ meat @ bread
    return 0.5 * (cov + cov.T)


def wald_group_test(fit: FitResult, robust_cov: np.ndarray, group) -> tuple:
    """Wald chi-square test that a coefficient group is jointly zero.

    Returns (statistic, df, p) with W = b' V^-1 b over the group's
    subvector and subcovariance.

    Raises
    ------
    np.linalg.LinAlgError
        If the subcovariance is singular (not positive definite).
    """
    group = list(group)
    if not group:
        raise ValueError("empty coefficient group")
    b = fit.coef[group]
    V = np.asarray(robust_cov)[np.ix_(group, group)]
    L = np.linalg.cholesky(V)  # raises LinAlgError if singular
    u = np.linalg.solve(L, b)
    W = float(u @ u)
    df = len(group)
    return W, df, chi2_sf(W, df)


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution.

    Computed through the regularized incomplete gamma function,
    Q(df/2, x/2), with the usual series/continued-fraction split;
    absolute error is far below 1e-10 over the useful range.
    """
    if int(df) != df or df < 1:
        raise ValueError("df must be a positive integer")
    x = float(x)
    if x < 0.0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 1.0
    a = 0.5 * df
    z = 0.5 * x
    if z < a + 1.0:
        return max(0.0, min(1.0, 1.0 - _gamma_p_series(a, z)))
    return max(0.0, min(1.0, _gamma_q_contfrac(a, z)))


def _gamma_p_series(a: float, x: float) -> float:
    # P(a, x) = x^a e^-x / Gamma(a) * sum_k x^k / (a+1)...(a+k)
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(1000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # Q(a, x) by modified Lentz continued fraction
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-17:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def anova_table(records: pd.DataFrame) -> pd.DataFrame:
    """Wald tests for the six model terms on one record set.

    Fits the accuracy regression, attaches the by-object robust
    covariance, and tests each term group; returns a table with
    columns effect, df, wald_chi2, p_value in fixed row order.
    """
    design = encode_design(records)
    y = records["correct"].to_numpy(dtype=float)
    fit = irls_fit(design, y)
    robust = sandwich_cov(design, y, fit, design.clusters)
    fit = replace(fit, robust_cov=robust)
    rows = []
    for effect, group in EFFECTS:
        W, df, p = wald_group_test(fit, robust, group)
        rows.append({"effect": effect, "df": df, "wald_chi2": W, "p_value": p})
    return pd.DataFrame(rows, columns=ANOVA_COLUMNS)


def write_anova_csv(table: pd.DataFrame, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANOVA_COLUMNS)
        for row in table.itertuples(index=False):
            writer.writerow(
                [
                    row.effect,
                    int(row.df),
                    repr(float(row.wald_chi2)),
                    repr(float(row.p_value)),
                ]
            )
