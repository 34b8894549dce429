"""Generative model for category learning under two interacting biases.

A learner categorizing exemplars with ``n_features`` perceptual dimensions
into ``n_categories`` holds two simplex-valued biases over features: a
conceptual domain bias and a label-induced bias, each with a Dirichlet
prior.  A nonnegative weight blends them into a single bias per feature,
which a power-law transform maps to the correlation between category means
on that feature.  Category means get an equicorrelated multivariate normal
prior; observations are feature values per category corrupted by perceptual
noise.

This module holds the domain types, the individual log densities and
transforms, the joint log density, and the bijection between constrained
latent states and an unconstrained real vector (with log-Jacobian and
analytic gradient) that samplers operate on.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, gammaln, log_expit, log_ndtr

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
CLAMP_SLACK = 1e-12
CORR_EPS = 1e-6

LOG_2PI = math.log(2.0 * math.pi)
HALF_NORMAL_CONST = 0.5 * math.log(2.0 / math.pi)


class SingularCovarianceError(ValueError):
    """Covariance factorization failed (matrix not positive definite)."""


_singularity_lock = threading.Lock()
_singularity_count = 0


def _record_singularity(context: str) -> None:
    global _singularity_count
    with _singularity_lock:
        _singularity_count += 1
        count = _singularity_count
    logger.warning("singular covariance in %s (event %d); density set to -inf", context, count)


def singularity_count() -> int:
    """Number of covariance factorization failures absorbed as -inf so far."""
    return _singularity_count


def reset_singularity_count() -> None:
    global _singularity_count
    with _singularity_lock:
        _singularity_count = 0


class BiasClass(Enum):
    """Alignment of a bias-induced prior with the true category structure."""

    RIGHT = "right"
    NONE = "none"
    WRONG = "wrong"

    def concentration(
        self,
        n_features: int,
        diagnostic_feature: int = 0,
        diagnostic_first: bool = True,
    ) -> np.ndarray:
        """Dirichlet concentration vector for this bias class.

        The two-level settings are right (1, 10), none (10, 10) and
        wrong (10, 1); the first entry is placed on the diagnostic feature
        and the second on every other feature.  ``diagnostic_first=False``
        swaps the orientation (used only by the calibration fixtures).
        """
        pair = _BIAS_TABLE[self]
        if not diagnostic_first:
            pair = (pair[1], pair[0])
        alpha = np.full(n_features, pair[1], dtype=float)
        alpha[diagnostic_feature] = pair[0]
        return alpha


_BIAS_TABLE = {
    BiasClass.RIGHT: (1.0, 10.0),
    BiasClass.NONE: (10.0, 10.0),
    BiasClass.WRONG: (10.0, 1.0),
}


@dataclass(frozen=True)
class Hyperparams:
    """Fixed parameters of the generative model.

    alpha_domain, alpha_label: Dirichlet concentrations over features for
        the domain and label biases, strictly positive, length n_features.
    weight_loc, weight_scale: center and spread of the truncated-normal
        distribution of the domain weight; weight_scale == 0 pins the
        weight at weight_loc.
    gamma: power-law exponent of the bias-to-correlation transform, >= 1.
    noise_var: perceptual noise variance added to each category's
        observation variance, > 0.
    """

    alpha_domain: np.ndarray
    alpha_label: np.ndarray
    weight_loc: float
    weight_scale: float
    gamma: float
    noise_var: float
    n_features: int
    n_categories: int

    def __post_init__(self):
        object.__setattr__(self, "alpha_domain", np.asarray(self.alpha_domain, dtype=float))
        object.__setattr__(self, "alpha_label", np.asarray(self.alpha_label, dtype=float))
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.n_categories < 2:
            raise ValueError("n_categories must be >= 2")
        for name, alpha in (("alpha_domain", self.alpha_domain), ("alpha_label", self.alpha_label)):
            if alpha.shape != (self.n_features,):
                raise ValueError(f"{name} must have length n_features={self.n_features}")
            if np.any(alpha <= 0):
                raise ValueError(f"{name} components must be strictly positive")
        if self.weight_loc < 0:
            raise ValueError("weight_loc must be >= 0")
        if self.weight_scale < 0:
            raise ValueError("weight_scale must be >= 0")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")

    @property
    def weight_is_free(self) -> bool:
        return self.weight_scale > 0


@dataclass(frozen=True)
class LatentState:
    """One joint configuration of the latent variables.

    domain_bias and label_bias lie on the feature simplex; domain_weight is
    the nonnegative blending weight; sigma holds the per-feature
    per-category standard deviations (n_features x n_categories, positive)
    and mu the category means of the same shape.
    """

    domain_bias: np.ndarray
    label_bias: np.ndarray
    domain_weight: float
    sigma: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "domain_bias", np.asarray(self.domain_bias, dtype=float))
        object.__setattr__(self, "label_bias", np.asarray(self.label_bias, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        for name, vec in (("domain_bias", self.domain_bias), ("label_bias", self.label_bias)):
            if abs(float(vec.sum()) - 1.0) > 1e-12:
                raise ValueError(f"{name} must sum to 1 within 1e-12")
        if self.domain_weight < 0:
            raise ValueError("domain_weight must be >= 0")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma entries must be positive")
        if self.sigma.shape != self.mu.shape:
            raise ValueError("sigma and mu must have the same shape")


@dataclass(frozen=True)
class FeatureCovariance:
    """Correlation and covariance of the category means for one feature."""

    feature: int
    correlation: float
    correlation_matrix: np.ndarray
    covariance: np.ndarray


def dirichlet_logpdf(x: np.ndarray, alpha: np.ndarray) -> float:
    """Log density of Dirichlet(alpha) at x.

    Returns -inf for x outside the open simplex (any component <= 0, or
    sum off 1 beyond tolerance).  Raises for invalid alpha or mismatched
    lengths.
    """
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if x.ndim != 1 or x.shape != alpha.shape:
        raise ValueError("x and alpha must be 1-D vectors of equal length")
    if np.any(alpha <= 0):
        raise ValueError("alpha components must be strictly positive")
    if np.any(x <= 0) or abs(float(x.sum()) - 1.0) > SIMPLEX_TOL:
        return float("-inf")
    norm = gammaln(float(alpha.sum())) - float(gammaln(alpha).sum())
    return float(norm + np.dot(alpha - 1.0, np.log(x)))


def sample_dirichlet(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one vector from Dirichlet(alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha components must be strictly positive")
    return rng.dirichlet(alpha)


def truncated_normal_logpdf(omega: float, loc: float, scale: float) -> float:
    """Log density at omega of Normal(loc, scale) truncated below at zero."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    if omega < 0:
        return float("-inf")
    z = (omega - loc) / scale
    # upper-tail normalization: P(X > 0) = ndtr(loc / scale)
    return float(-0.5 * z * z - math.log(scale) - 0.5 * LOG_2PI - log_ndtr(loc / scale))


def combine_biases(p: np.ndarray, k: np.ndarray, omega: float) -> np.ndarray:
    """Blend the two bias vectors as omega * p + (1 - omega) * k."""
    p = np.asarray(p, dtype=float)
    k = np.asarray(k, dtype=float)
    if p.shape != k.shape:
        raise ValueError("bias vectors must have equal length")
    return omega * p + (1.0 - omega) * k


def power_transform(x, gamma: float):
    """Map a bias value in [0, 1] to a correlation in [-1, 1].

    Computes 2 * (x**(1/gamma) - 0.5): monotone in x, -1 at 0 and 1 at 1,
    linear for gamma == 1 and increasingly steep near zero for larger
    gamma.  Inputs may stray outside [0, 1] by at most 1e-12.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    arr = np.asarray(x, dtype=float)
    if np.any(arr < -CLAMP_SLACK) or np.any(arr > 1.0 + CLAMP_SLACK):
        raise ValueError("input must lie in [0, 1] (slack 1e-12)")
    out = 2.0 * (np.clip(arr, 0.0, 1.0) ** (1.0 / gamma) - 0.5)
    return float(out) if np.isscalar(x) else out


def bias_correlation(p: np.ndarray, k: np.ndarray, omega: float, gamma: float) -> np.ndarray:
    """Per-feature category-mean correlation induced by the combined bias.

    The combined bias is clipped into [0, 1] first: with weights above 1
    the blend can leave the simplex, and the transform is only defined on
    the unit interval.
    """
    combined = np.clip(combine_biases(p, k, omega), 0.0, 1.0)
    return power_transform(combined, gamma)


def correlation_bounds(n_categories: int) -> tuple[float, float]:
    """Open interval of off-diagonal values keeping an equicorrelation matrix PD."""
    if n_categories < 2:
        raise ValueError("need at least 2 categories")
    return (-1.0 / (n_categories - 1) + CORR_EPS, 1.0 - CORR_EPS)


def build_correlation(r: float, n_categories: int) -> np.ndarray:
    """Equicorrelation matrix with off-diagonal r, clamped to stay PD."""
    if n_categories < 2:
        raise ValueError("need at least 2 categories")
    if r < -1.0 - CLAMP_SLACK or r > 1.0 + CLAMP_SLACK:
        raise ValueError("correlation must lie in [-1, 1]")
    lo, hi = correlation_bounds(n_categories)
    rc = min(max(float(r), lo), hi)
    mat = np.full((n_categories, n_categories), rc)
    np.fill_diagonal(mat, 1.0)
    return mat


def build_covariance(sigma_row: np.ndarray, correlation: np.ndarray) -> np.ndarray:
    """Covariance diag(sigma) @ R @ diag(sigma) for one feature."""
    sigma_row = np.asarray(sigma_row, dtype=float)
    if np.any(sigma_row <= 0):
        raise ValueError("sigma entries must be positive")
    if correlation.shape != (sigma_row.size, sigma_row.size):
        raise ValueError("correlation matrix shape does not match sigma length")
    return correlation * np.outer(sigma_row, sigma_row)


def feature_covariance(state: LatentState, hyper: Hyperparams, feature: int) -> FeatureCovariance:
    """Assemble the category-mean covariance for one feature of a state."""
    r = bias_correlation(
        state.domain_bias, state.label_bias, state.domain_weight, hyper.gamma
    )[feature]
    corr = build_correlation(float(r), hyper.n_categories)
    cov = build_covariance(state.sigma[feature], corr)
    return FeatureCovariance(feature, float(r), corr, cov)


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Multivariate normal log density via Cholesky factorization."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = x.size
    if mean.size != d or cov.shape != (d, d):
        raise ValueError("dimension mismatch between x, mean, and cov")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance is not positive definite") from exc
    white = np.linalg.solve(chol, x - mean)
    return float(
        -0.5 * d * LOG_2PI - np.log(np.diag(chol)).sum() - 0.5 * np.dot(white, white)
    )


def sigma_prior_logpdf(sigma: np.ndarray) -> float:
    """Independent half-normal(1) log density over all sd entries."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        return float("-inf")
    return float(sigma.size * HALF_NORMAL_CONST - 0.5 * np.sum(sigma * sigma))


def log_joint(state: LatentState, observations: np.ndarray, hyper: Hyperparams) -> float:
    """Joint log density of a latent state and the observed category vectors.

    ``observations`` has shape (n_features, n_obs, n_categories): for each
    feature, a list of per-category value vectors.  Returns -inf whenever
    any latent lies outside its support; covariance factorization failures
    are absorbed as -inf and counted (see ``singularity_count``).
    """
    F, C = hyper.n_features, hyper.n_categories
    observations = np.asarray(observations, dtype=float)
    if observations.ndim != 3 or observations.shape[0] != F or observations.shape[2] != C:
        raise ValueError("observations must have shape (n_features, n_obs, n_categories)")
    if state.sigma.shape != (F, C) or state.mu.shape != (F, C):
        raise ValueError("state dimensions do not match hyperparameters")
    if state.domain_bias.size != F or state.label_bias.size != F:
        raise ValueError("bias vectors do not match n_features")

    if np.any(state.sigma <= 0) or state.domain_weight < 0:
        return float("-inf")

    lp = dirichlet_logpdf(state.domain_bias, hyper.alpha_domain)
    lp += dirichlet_logpdf(state.label_bias, hyper.alpha_label)
    if hyper.weight_is_free:
        lp += truncated_normal_logpdf(state.domain_weight, hyper.weight_loc, hyper.weight_scale)
    lp += sigma_prior_logpdf(state.sigma)
    if not np.isfinite(lp):
        return float("-inf")

    r = bias_correlation(state.domain_bias, state.label_bias, state.domain_weight, hyper.gamma)
    zeros = np.zeros(C)
    for i in range(F):
        corr = build_correlation(float(r[i]), C)
        cov = build_covariance(state.sigma[i], corr)
        try:
            lp += mvn_logpdf(state.mu[i], zeros, cov)
        except SingularCovarianceError:
            _record_singularity("log_joint mean prior")
            return float("-inf")
        obs_cov = np.diag(state.sigma[i] ** 2 + hyper.noise_var)
        for y in observations[i]:
            lp += mvn_logpdf(y, state.mu[i], obs_cov)
    return float(lp)


# --- unconstrained parameterization ---------------------------------------
#
# Layout of the unconstrained vector z:
#   [ domain-bias sticks (F-1) | label-bias sticks (F-1) |
#     log domain_weight (only when weight_scale > 0) |
#     log sigma (F*C, row-major) | whitened mu (F*C, row-major) ]
#
# Simplices use the stick-breaking transform with logistic links and
# offsets log(K - k), so the uniform simplex maps to the zero vector.
# Means are carried whitened: mu_i = diag(sigma_i) L(r_i) eta_i with L the
# Cholesky factor of the equicorrelation matrix, so eta has an exact
# standard-normal conditional prior.  The centered alternative couples mu
# to sigma (a funnel once the likelihood stops seeing sigma below the
# perceptual noise floor) and to r (a near-singular ridge when the
# combined bias drives r toward the clamp); both geometries defeat
# fixed-step samplers, while any coupling left here is capped by how
# informative the data are.


@dataclass(frozen=True)
class UnconstrainedLayout:
    """Index slices of each latent block inside the unconstrained vector."""

    domain_sticks: slice
    label_sticks: slice
    log_weight: slice | None
    log_sigma: slice
    scaled_mu: slice
    dim: int


def unconstrained_layout(hyper: Hyperparams) -> UnconstrainedLayout:
    F, C = hyper.n_features, hyper.n_categories
    n_sticks = F - 1
    pos = 0
    domain_sticks = slice(pos, pos + n_sticks)
    pos += n_sticks
    label_sticks = slice(pos, pos + n_sticks)
    pos += n_sticks
    if hyper.weight_is_free:
        log_weight = slice(pos, pos + 1)
        pos += 1
    else:
        log_weight = None
    log_sigma = slice(pos, pos + F * C)
    pos += F * C
    scaled_mu = slice(pos, pos + F * C)
    pos += F * C
    return UnconstrainedLayout(
        domain_sticks, label_sticks, log_weight, log_sigma, scaled_mu, pos
    )


def unconstrained_dim(hyper: Hyperparams) -> int:
    return unconstrained_layout(hyper).dim


def _stick_offsets(n: int) -> np.ndarray:
    # offsets log(K - k) for sticks k = 1..K-1 of a K-simplex, K = n + 1
    return np.log(np.arange(n, 0, -1, dtype=float))


def clamped_bias_correlation(
    p: np.ndarray, k: np.ndarray, omega: float, hyper: Hyperparams
) -> np.ndarray:
    """Per-feature correlation clipped into the PD interval for C categories."""
    lo, hi = correlation_bounds(hyper.n_categories)
    return np.clip(bias_correlation(p, k, omega, hyper.gamma), lo, hi)


def _equicorr_chol(r: np.ndarray, n_categories: int, want_grad: bool = False):
    """Cholesky columns of equicorrelation matrices, vectorized over rows of r.

    The factor of R = (1-r) I + r J has column j equal to o_j / sqrt(d_j)
    below a diagonal of sqrt(d_j), where d and o follow the elimination
    recursion d_{j+1} = d_j - o_j^2/d_j, o_{j+1} = o_j (1 - o_j/d_j) from
    d_0 = 1, o_0 = r.  Returns (diag, below) with shapes r.shape + (C,)
    and r.shape + (C-1,); with want_grad also their derivatives in r.
    """
    C = n_categories
    shape = np.shape(r)
    diag = np.empty(shape + (C,))
    below = np.empty(shape + (C - 1,))
    d = np.ones(shape)
    o = np.array(r, dtype=float, copy=True)
    if want_grad:
        ddiag = np.empty_like(diag)
        dbelow = np.empty_like(below)
        dd = np.zeros(shape)
        do = np.ones(shape)
    for j in range(C - 1):
        s = np.sqrt(d)
        diag[..., j] = s
        below[..., j] = o / s
        ratio = o / d
        if want_grad:
            ds = dd / (2.0 * s)
            ddiag[..., j] = ds
            dbelow[..., j] = do / s - o * ds / d
            dratio = (do * d - o * dd) / (d * d)
            dd = dd - do * ratio - o * dratio
            do = do - do * ratio - o * dratio
        d = d - o * ratio
        o = o - o * ratio
    s = np.sqrt(d)
    diag[..., C - 1] = s
    if want_grad:
        ddiag[..., C - 1] = dd / (2.0 * s)
        return diag, below, ddiag, dbelow
    return diag, below


def _chol_apply(diag, below, eta):
    """m = L eta columnwise: m_i = diag_i eta_i + sum_{j<i} below_j eta_j."""
    C = eta.shape[-1]
    m = np.empty_like(eta)
    acc = np.zeros(eta.shape[:-1])
    for i in range(C):
        m[..., i] = diag[..., i] * eta[..., i] + acc
        if i < C - 1:
            acc = acc + below[..., i] * eta[..., i]
    return m


def _chol_solve(diag, below, m):
    """Forward substitution inverting ``_chol_apply``."""
    C = m.shape[-1]
    eta = np.empty_like(m)
    acc = np.zeros(m.shape[:-1])
    for i in range(C):
        eta[..., i] = (m[..., i] - acc) / diag[..., i]
        if i < C - 1:
            acc = acc + below[..., i] * eta[..., i]
    return eta


def _chol_transpose_apply(diag, below, g):
    """L^T g columnwise: out_j = diag_j g_j + below_j sum_{i>j} g_i."""
    C = g.shape[-1]
    out = np.empty_like(g)
    suffix = np.zeros(g.shape[:-1])
    for j in range(C - 1, -1, -1):
        out[..., j] = diag[..., j] * g[..., j]
        if j < C - 1:
            out[..., j] += below[..., j] * suffix
        suffix = suffix + g[..., j]
    return out


def _sticks_to_simplex(y: np.ndarray):
    """Stick coordinates -> (simplex point, log point, fractions, log-Jacobian)."""
    n = y.size
    u = y - _stick_offsets(n)
    frac = expit(u)
    log_frac = log_expit(u)
    log_rest = log_expit(-u)
    log_remain = np.concatenate(([0.0], np.cumsum(log_rest)))
    log_x = np.empty(n + 1)
    log_x[:n] = log_frac + log_remain[:n]
    log_x[n] = log_remain[n]
    x = np.exp(log_x)
    log_jac = float(np.sum(log_frac + log_rest + log_remain[:n]))
    return x, log_x, frac, log_jac


def _simplex_to_sticks(x: np.ndarray) -> np.ndarray:
    n = x.size - 1
    if np.any(x <= 0):
        raise ValueError("simplex point must be interior (no zero components)")
    y = np.empty(n)
    remain = 1.0
    offsets = _stick_offsets(n)
    for i in range(n):
        frac = x[i] / remain
        if not 0.0 < frac < 1.0:
            raise ValueError("simplex point must be interior")
        y[i] = math.log(frac / (1.0 - frac)) + offsets[i]
        remain -= x[i]
    return y


def unconstrain(state: LatentState, hyper: Hyperparams) -> np.ndarray:
    """Map an interior latent state to the unconstrained vector.

    Boundary states (zero bias components, zero weight when the weight is
    free) are rejected; callers must perturb them first.
    """
    layout = unconstrained_layout(hyper)
    z = np.empty(layout.dim)
    z[layout.domain_sticks] = _simplex_to_sticks(state.domain_bias)
    z[layout.label_sticks] = _simplex_to_sticks(state.label_bias)
    if layout.log_weight is not None:
        if state.domain_weight <= 0:
            raise ValueError("domain_weight must be positive to unconstrain")
        z[layout.log_weight] = math.log(state.domain_weight)
    z[layout.log_sigma] = np.log(state.sigma).ravel()
    r = clamped_bias_correlation(
        state.domain_bias, state.label_bias, state.domain_weight, hyper
    )
    diag, below = _equicorr_chol(r, hyper.n_categories)
    z[layout.scaled_mu] = _chol_solve(diag, below, state.mu / state.sigma).ravel()
    return z


def constrain(z: np.ndarray, hyper: Hyperparams) -> LatentState:
    """Map an unconstrained vector back to a latent state."""
    z = np.asarray(z, dtype=float)
    layout = unconstrained_layout(hyper)
    if z.shape != (layout.dim,):
        raise ValueError(f"expected unconstrained vector of length {layout.dim}")
    F, C = hyper.n_features, hyper.n_categories
    p, _, _, _ = _sticks_to_simplex(z[layout.domain_sticks])
    k, _, _, _ = _sticks_to_simplex(z[layout.label_sticks])
    if layout.log_weight is not None:
        omega = float(np.exp(z[layout.log_weight][0]))
    else:
        omega = hyper.weight_loc
    sigma = np.exp(z[layout.log_sigma]).reshape(F, C)
    r = clamped_bias_correlation(p, k, omega, hyper)
    diag, below = _equicorr_chol(r, C)
    mu = sigma * _chol_apply(diag, below, z[layout.scaled_mu].reshape(F, C))
    return LatentState(p, k, omega, sigma, mu)


def transform_log_jacobian(z: np.ndarray, hyper: Hyperparams) -> float:
    """Log absolute Jacobian determinant of ``constrain`` at z."""
    z = np.asarray(z, dtype=float)
    layout = unconstrained_layout(hyper)
    if z.shape != (layout.dim,):
        raise ValueError(f"expected unconstrained vector of length {layout.dim}")
    p, _, _, jac_p = _sticks_to_simplex(z[layout.domain_sticks])
    k, _, _, jac_k = _sticks_to_simplex(z[layout.label_sticks])
    # log sigma enters once for the sigma map and once more for the mean
    # rescaling; the whitening contributes half the correlation logdet
    total = jac_p + jac_k + 2.0 * float(z[layout.log_sigma].sum())
    if layout.log_weight is not None:
        omega = float(np.exp(z[layout.log_weight][0]))
        total += float(z[layout.log_weight][0])
    else:
        omega = hyper.weight_loc
    C = hyper.n_categories
    r = clamped_bias_correlation(p, k, omega, hyper)
    logdet_r = (C - 1) * np.log1p(-r) + np.log1p((C - 1) * r)
    total += 0.5 * float(logdet_r.sum())
    return total


def constrained_names(hyper: Hyperparams) -> list[str]:
    """Names of the constrained latent coordinates, in flattening order."""
    F, C = hyper.n_features, hyper.n_categories
    names = [f"p_{i}" for i in range(F)]
    names += [f"k_{i}" for i in range(F)]
    names.append("omega")
    names += [f"sigma_{i}_{c}" for i in range(F) for c in range(C)]
    names += [f"mu_{i}_{c}" for i in range(F) for c in range(C)]
    return names


def state_to_vector(state: LatentState) -> np.ndarray:
    """Flatten a latent state in the ``constrained_names`` order."""
    return np.concatenate(
        (
            state.domain_bias,
            state.label_bias,
            [state.domain_weight],
            state.sigma.ravel(),
            state.mu.ravel(),
        )
    )


def constrain_batch(draws: np.ndarray, hyper: Hyperparams) -> np.ndarray:
    """Vectorized ``constrain`` + ``state_to_vector`` over rows of draws."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    layout = unconstrained_layout(hyper)
    if draws.shape[1] != layout.dim:
        raise ValueError(f"expected unconstrained vectors of length {layout.dim}")
    F, C = hyper.n_features, hyper.n_categories
    n = draws.shape[0]

    def simplex_rows(y):
        u = y - _stick_offsets(F - 1)
        frac = expit(u)
        log_rest = log_expit(-u)
        log_remain = np.concatenate(
            (np.zeros((n, 1)), np.cumsum(log_rest, axis=1)), axis=1
        )
        x = np.empty((n, F))
        x[:, : F - 1] = frac * np.exp(log_remain[:, : F - 1])
        x[:, F - 1] = np.exp(log_remain[:, F - 1])
        return x

    out = np.empty((n, 2 * F + 1 + 2 * F * C))
    p = simplex_rows(draws[:, layout.domain_sticks])
    k = simplex_rows(draws[:, layout.label_sticks])
    out[:, :F] = p
    out[:, F : 2 * F] = k
    if layout.log_weight is not None:
        omega = np.exp(draws[:, layout.log_weight][:, 0])
    else:
        omega = np.full(n, hyper.weight_loc)
    out[:, 2 * F] = omega
    sigma = np.exp(draws[:, layout.log_sigma])
    out[:, 2 * F + 1 : 2 * F + 1 + F * C] = sigma
    lo, hi = correlation_bounds(C)
    combined = np.clip(omega[:, None] * p + (1.0 - omega[:, None]) * k, 0.0, 1.0)
    r = np.clip(2.0 * (combined ** (1.0 / hyper.gamma) - 0.5), lo, hi)  # (n, F)
    diag, below = _equicorr_chol(r, C)
    eta = draws[:, layout.scaled_mu].reshape(n, F, C)
    mu = sigma.reshape(n, F, C) * _chol_apply(diag, below, eta)
    out[:, 2 * F + 1 + F * C :] = mu.reshape(n, F * C)
    return out


class JointTarget:
    """Joint log density in unconstrained coordinates, ready for sampling.

    Precomputes per-feature observation counts and first/second moment sums
    so each evaluation costs O(n_features * n_categories) regardless of the
    number of observations.  ``log_density`` equals
    ``log_joint(constrain(z)) + transform_log_jacobian(z)`` up to floating
    point, and ``log_density_and_grad`` adds the analytic gradient.
    """

    def __init__(self, hyper: Hyperparams, observations: np.ndarray):
        observations = np.asarray(observations, dtype=float)
        F, C = hyper.n_features, hyper.n_categories
        if observations.ndim != 3 or observations.shape[0] != F or observations.shape[2] != C:
            raise ValueError("observations must have shape (n_features, n_obs, n_categories)")
        self.hyper = hyper
        self.layout = unconstrained_layout(hyper)
        self.n_obs = observations.shape[1]
        self.obs_sum = observations.sum(axis=1)          # (F, C)
        self.obs_sumsq = (observations**2).sum(axis=1)   # (F, C)
        self.singular_events = 0

        self._ad = hyper.alpha_domain - 1.0
        self._al = hyper.alpha_label - 1.0
        self._dir_const = float(
            gammaln(hyper.alpha_domain.sum())
            - gammaln(hyper.alpha_domain).sum()
            + gammaln(hyper.alpha_label.sum())
            - gammaln(hyper.alpha_label).sum()
        )
        if hyper.weight_is_free:
            self._trunc_const = float(
                -math.log(hyper.weight_scale)
                - 0.5 * LOG_2PI
                - log_ndtr(hyper.weight_loc / hyper.weight_scale)
            )
        self._corr_lo, self._corr_hi = correlation_bounds(C)
        self._offsets = _stick_offsets(F - 1)

    @property
    def dim(self) -> int:
        return self.layout.dim

    def constrain(self, z: np.ndarray) -> LatentState:
        return constrain(z, self.hyper)

    def _unpack(self, z):
        hyper = self.hyper
        F, C = hyper.n_features, hyper.n_categories
        layout = self.layout
        u_p = z[layout.domain_sticks] - self._offsets
        u_k = z[layout.label_sticks] - self._offsets
        if layout.log_weight is not None:
            z_w = float(z[layout.log_weight][0])
            omega = float(np.exp(z_w))  # inf is fine, the -inf guard absorbs it
        else:
            z_w = None
            omega = hyper.weight_loc
        z_sigma = z[layout.log_sigma]
        sigma = np.exp(z_sigma).reshape(F, C)
        eta = z[layout.scaled_mu].reshape(F, C)
        return u_p, u_k, z_w, omega, z_sigma, sigma, eta

    def log_density(self, z: np.ndarray) -> float:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value, _, _ = self._density(np.asarray(z, dtype=float), want_grad=False)
        return value

    def log_density_and_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value, grad, _ = self._density(z, want_grad=True)
        return value, grad

    def category_reflection(self, z: np.ndarray) -> np.ndarray:
        """Map a draw to its mirror image under category-label reversal.

        Reverses the per-category sigmas and carries the whitened means to
        the point whose constrained means are negated and category-reversed.
        The prior is exactly invariant under this map (the equicorrelation
        matrix is unchanged by reversing categories, and the mean prior is
        centered at zero), and the map is an involution whose Jacobian has
        unit determinant, so it is a valid deterministic Metropolis proposal.
        Posteriors on category-symmetric data split into two mirror modes
        separated by a density barrier; proposing this jump alongside a
        local kernel lets chains exchange between them.
        """
        z = np.asarray(z, dtype=float)
        hyper = self.hyper
        F, C = hyper.n_features, hyper.n_categories
        layout = self.layout
        u_p, u_k, z_w, omega, z_sigma, sigma, eta = self._unpack(z)
        _, _, p, _ = _sticks_from_logits(u_p)
        _, _, k, _ = _sticks_from_logits(u_k)
        b = np.clip(omega * p + (1.0 - omega) * k, 0.0, 1.0)
        r = np.clip(
            2.0 * (b ** (1.0 / hyper.gamma) - 0.5), self._corr_lo, self._corr_hi
        )
        diag, below = _equicorr_chol(r, C)
        whitened = _chol_apply(diag, below, eta)          # L eta, (F, C)
        eta_out = _chol_solve(diag, below, -whitened[:, ::-1])
        out = z.copy()
        out[layout.log_sigma] = z_sigma.reshape(F, C)[:, ::-1].ravel()
        out[layout.scaled_mu] = eta_out.ravel()
        return out

    def _density(self, z, want_grad):
        hyper = self.hyper
        F, C = hyper.n_features, hyper.n_categories
        layout = self.layout
        u_p, u_k, z_w, omega, z_sigma, sigma, eta = self._unpack(z)

        # stick-breaking for both simplices
        frac_p, log_p, p, jac_p = _sticks_from_logits(u_p)
        frac_k, log_k, k, jac_k = _sticks_from_logits(u_k)

        lp = self._dir_const + float(np.dot(self._ad, log_p) + np.dot(self._al, log_k))
        lp += jac_p + jac_k

        if z_w is not None:
            t = (omega - hyper.weight_loc) / hyper.weight_scale
            lp += self._trunc_const - 0.5 * t * t + z_w  # + z_w is the log-Jacobian
        sigsq = sigma * sigma
        # half-normal prior; of the two sigma Jacobian terms, one is
        # cancelled by the -log sigma inside the mean prior, and the
        # whitening Jacobian cancels the prior's -1/2 logdet R likewise
        lp += F * C * HALF_NORMAL_CONST - 0.5 * float(sigsq.sum())
        lp += float(z_sigma.sum())

        # combined bias -> correlation, clipped into the PD interval
        b_raw = omega * p + (1.0 - omega) * k
        b = np.clip(b_raw, 0.0, 1.0)
        r_raw = 2.0 * (b ** (1.0 / hyper.gamma) - 0.5)
        r = np.clip(r_raw, self._corr_lo, self._corr_hi)

        # whitened mean prior is standard normal
        lp += float(-0.5 * (F * C * LOG_2PI + (eta * eta).sum()))

        if want_grad:
            diag, below, ddiag, dbelow = _equicorr_chol(r, C, want_grad=True)
        else:
            diag, below = _equicorr_chol(r, C)

        # observation likelihood with variance sigma^2 + noise_var per cell
        n = self.n_obs
        mu = sigma * _chol_apply(diag, below, eta)
        v = sigsq + hyper.noise_var
        sse = self.obs_sumsq - 2.0 * mu * self.obs_sum + n * mu * mu
        lp += float(-0.5 * ((sse / v).sum() + n * np.log(v).sum() + n * F * C * LOG_2PI))

        if not np.isfinite(lp):
            lp = float("-inf")
            if want_grad:
                return lp, np.zeros(layout.dim), None
            return lp, None, None
        if not want_grad:
            return float(lp), None, None

        grad = np.empty(layout.dim)

        # d/deta: standard-normal prior plus likelihood pulled back by
        # (diag(sigma) L)^T
        g_mu_lik = (self.obs_sum - n * mu) / v
        grad[layout.scaled_mu] = (
            -eta + _chol_transpose_apply(diag, below, g_mu_lik * sigma)
        ).ravel()

        # d/dsigma, then chain through sigma = exp(z_sigma); +1 is the
        # surviving sigma log-Jacobian term
        whitened = mu / sigma                        # L eta
        g_sigma = (
            -sigma                                   # half-normal prior
            + g_mu_lik * whitened                    # likelihood via mu = sigma (L eta)
            + (sse / v - n) * sigma / v              # likelihood via v = sigma^2 + noise
        )
        grad[layout.log_sigma] = (g_sigma * sigma).ravel() + 1.0

        # d/dr: the likelihood moving through dL/dr, alive only off the clips
        dmu_dr = sigma * _chol_apply(ddiag, dbelow, eta)
        g_r = (g_mu_lik * dmu_dr).sum(axis=1)
        active = (
            (r_raw > self._corr_lo)
            & (r_raw < self._corr_hi)
            & (b_raw > 0.0)
            & (b_raw < 1.0)
        )
        b_safe = np.where(active, b, 0.5)  # dead branch, avoids 0**negative
        dr_db = np.where(
            active, (2.0 / hyper.gamma) * b_safe ** (1.0 / hyper.gamma - 1.0), 0.0
        )
        g_b = g_r * dr_db

        g_p = self._ad / p + g_b * omega
        g_k = self._al / k + g_b * (1.0 - omega)
        grad[layout.domain_sticks] = _stick_backprop(g_p, p, frac_p)
        grad[layout.label_sticks] = _stick_backprop(g_k, k, frac_k)

        if z_w is not None:
            t = (omega - hyper.weight_loc) / hyper.weight_scale
            g_omega = -t / hyper.weight_scale + float(np.dot(g_b, p - k))
            grad[layout.log_weight] = g_omega * omega + 1.0

        return float(lp), grad, None


def _sticks_from_logits(u: np.ndarray):
    """Shared stick-breaking core working from offset-adjusted logits."""
    frac = expit(u)
    log_frac = log_expit(u)
    log_rest = log_expit(-u)
    K = u.size + 1
    log_remain = np.concatenate(([0.0], np.cumsum(log_rest)))
    log_x = np.empty(K)
    log_x[: K - 1] = log_frac + log_remain[: K - 1]
    log_x[K - 1] = log_remain[K - 1]
    x = np.exp(log_x)
    log_jac = float(np.sum(log_frac + log_rest + log_remain[: K - 1]))
    return frac, log_x, x, log_jac


def _stick_backprop(g_x: np.ndarray, x: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. simplex components back to stick coordinates.

    Includes the derivative of the stick-breaking log-Jacobian, so the
    caller passes only the density gradient w.r.t. the simplex point.
    """
    K = x.size
    gx = g_x * x
    suffix = np.concatenate((np.cumsum(gx[::-1])[::-1], [0.0]))  # sum_{j>=k} gx_j
    n = K - 1
    out = np.empty(n)
    for i in range(n):
        out[i] = gx[i] * (1.0 - frac[i]) - frac[i] * suffix[i + 1]
        out[i] += (1.0 - frac[i]) - (n - i) * frac[i]  # log-Jacobian derivative
    return out
