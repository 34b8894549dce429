"""MCMC engine for unconstrained log densities.

Two kernels behind one interface: a componentwise-scaled random-walk
Metropolis sampler (no gradients needed) and a static Hamiltonian Monte
Carlo sampler with jittered leapfrog trajectories (the default when a
gradient is available).  Both adapt a global step size by dual averaging
toward a target acceptance rate and a diagonal scale from warmup draw
variances, using expanding adaptation windows.

Convergence diagnostics follow current practice: split-chain potential
scale reduction (Gelman-Rubin with halved chains) and rank-normalized bulk
effective sample size with Geyer initial-monotone truncation (Vehtari et
al. 2021).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


class InitializationError(RuntimeError):
    """No finite-density initialization point was found."""


class AdaptationFailureError(RuntimeError):
    """Warmup adaptation failed (no acceptances, or step search diverged)."""


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for ``run_chains``.

    algorithm selects the kernel: "hmc" (needs a gradient) or "rwm".
    path_length is the HMC trajectory length in unconstrained units; the
    per-iteration leapfrog count is jittered uniformly below it to avoid
    resonances.  max_step_halvings caps the initial step-size search.

    jump_proposals are optional deterministic maps z -> z' attempted as
    extra Metropolis steps after every kernel iteration.  Each must be an
    involution with unit Jacobian determinant in the unconstrained space
    (accepted with probability min(1, density ratio)), the standard recipe
    for hopping between well-separated modes a local kernel cannot cross;
    the caller supplies maps encoding whatever structure the target has.
    """

    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    target_accept: float = 0.8
    seed: int = 0
    max_step_halvings: int = 30
    algorithm: str = "hmc"
    path_length: float = 2.0
    jump_proposals: tuple = ()

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup, self.n_samples) < 1:
            raise ValueError("chain, warmup, and sample counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.algorithm not in ("hmc", "rwm"):
            raise ValueError("algorithm must be 'hmc' or 'rwm'")
        if self.path_length <= 0:
            raise ValueError("path_length must be positive")
        if self.max_step_halvings < 1:
            raise ValueError("max_step_halvings must be positive")
        if not all(callable(m) for m in self.jump_proposals):
            raise ValueError("jump_proposals must be callables")


@dataclass(frozen=True)
class PosteriorDraws:
    """Post-warmup draws of all chains plus bookkeeping counters."""

    draws: np.ndarray                    # (n_chains, n_samples, dim)
    log_densities: np.ndarray = field(repr=False)  # (n_chains, n_samples)
    accept_rate: np.ndarray              # per chain, sampling phase
    divergences: int                     # HMC energy blowups, rejected
    neginf_proposals: int                # proposals landing at -inf density
    step_sizes: np.ndarray               # final adapted step per chain

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_densities)):
            raise ValueError("every stored draw must have finite log-density")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]


@dataclass(frozen=True)
class Diagnostics:
    """Per-dimension convergence summaries."""

    rhat: np.ndarray
    ess: np.ndarray


def _resolve_density(logdensity, grad):
    """Accept a plain callable, a (callable, grad) pair, or a target object."""
    if hasattr(logdensity, "log_density"):
        value_fn = logdensity.log_density
        grad_fn = getattr(logdensity, "log_density_and_grad", None)
        return value_fn, grad_fn
    value_fn = logdensity
    if grad is None:
        return value_fn, None

    def value_and_grad(z):
        return value_fn(z), np.asarray(grad(z), dtype=float)

    return value_fn, value_and_grad


class _DualAveraging:
    """Nesterov dual averaging of log step size (Hoffman & Gelman 2014)."""

    def __init__(self, step0: float, target: float):
        self.target = target
        self.log_step = math.log(step0)
        self.mu = math.log(10.0 * step0)
        self.log_step_bar = 0.0
        self.hbar = 0.0
        self.count = 0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        frac = 1.0 / (self.count + 10.0)
        self.hbar = (1.0 - frac) * self.hbar + frac * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(self.count) / 0.05 * self.hbar
        decay = self.count ** -0.75
        self.log_step_bar = decay * self.log_step + (1.0 - decay) * self.log_step_bar
        return math.exp(self.log_step)

    def restart(self, step0: float) -> None:
        self.__init__(step0, self.target)

    @property
    def adapted_step(self) -> float:
        return math.exp(self.log_step_bar) if self.count else math.exp(self.log_step)


class _RunningVariance:
    """Welford accumulator for the diagonal scale."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, z: np.ndarray) -> None:
        self.n += 1
        delta = z - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (z - self.mean)

    def regularized(self) -> np.ndarray:
        # shrink toward a small diagonal, as in Stan's windowed adaptation
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return np.maximum(w * var + (1.0 - w) * 1e-3, 1e-10)


def _variance_checkpoints(n_warmup: int) -> list[tuple[int, int]]:
    """(start, end) warmup windows whose draw variances update the scale."""
    if n_warmup < 100:
        return []
    init_buffer = min(75, int(0.15 * n_warmup))
    term_buffer = min(50, int(0.10 * n_warmup))
    windows = []
    start = init_buffer
    size = 25
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end > last or last - end < size * 2:
            end = last
        windows.append((start, end))
        start = end
        size *= 2
    return windows


def _find_initial_step(value_and_grad, z0, lp0, grad0, inv_mass, rng, cap):
    """Double or halve a trial step until leapfrog acceptance crosses 1/2."""
    step = 1.0
    p0 = rng.standard_normal(z0.size) / np.sqrt(inv_mass)

    def energy_delta(step):
        with np.errstate(over="ignore", invalid="ignore"):
            p = p0 + 0.5 * step * grad0
            z = z0 + step * inv_mass * p
            lp, grad = value_and_grad(z)
            if not np.all(np.isfinite(grad)) or not np.isfinite(lp):
                return -np.inf
            p = p + 0.5 * step * grad
            h0 = -lp0 + 0.5 * np.dot(p0 * p0, inv_mass)
            h1 = -lp + 0.5 * np.dot(p * p, inv_mass)
        res = h0 - h1
        return -np.inf if math.isnan(res) else res

    delta = energy_delta(step)
    direction = 1 if delta > math.log(0.5) else -1
    for _ in range(cap):
        step = step * (2.0 if direction == 1 else 0.5)
        delta = energy_delta(step)
        if (direction == 1 and delta <= math.log(0.5)) or (
            direction == -1 and delta >= math.log(0.5)
        ):
            return step
    raise AdaptationFailureError("initial step-size search exhausted its halving cap")


def run_chains(logdensity, dim: int, config: SamplerConfig, grad=None) -> PosteriorDraws:
    """Sample ``config.n_chains`` independent chains of the target density.

    ``logdensity`` is either a callable mapping a length-``dim`` vector to
    a real, or an object with ``log_density`` and (for HMC)
    ``log_density_and_grad`` methods; a separate ``grad`` callable may
    supply gradients for a plain callable.  Deterministic given the config
    seed.
    """
    value_fn, vag_fn = _resolve_density(logdensity, grad)
    if config.algorithm == "hmc" and vag_fn is None:
        raise ValueError(
            "hmc needs a gradient: pass grad=, a target object, or algorithm='rwm'"
        )
    results = [
        _run_single_chain(value_fn, vag_fn, dim, config, idx)
        for idx in range(config.n_chains)
    ]
    draws = np.stack([r[0] for r in results])
    lps = np.stack([r[1] for r in results])
    rates = np.array([r[2] for r in results])
    steps = np.array([r[5] for r in results])
    return PosteriorDraws(
        draws=draws,
        log_densities=lps,
        accept_rate=rates,
        divergences=sum(r[3] for r in results),
        neginf_proposals=sum(r[4] for r in results),
        step_sizes=steps,
    )


def _initialize(value_fn, dim, rng):
    for _ in range(100):
        z = rng.uniform(-1.0, 1.0, size=dim)
        lp = value_fn(z)
        if np.isfinite(lp):
            return z, lp
    raise InitializationError("no finite log-density found in 100 initialization draws")


def _run_single_chain(value_fn, vag_fn, dim, config, chain_idx):
    rng = np.random.default_rng([config.seed, chain_idx])
    z, lp = _initialize(value_fn, dim, rng)
    hmc = config.algorithm == "hmc"

    inv_mass = np.ones(dim)
    if hmc:
        lp, grad = vag_fn(z)
        step = _find_initial_step(
            vag_fn, z, lp, grad, inv_mass, rng, config.max_step_halvings
        )
    else:
        grad = None
        step = 2.38 / math.sqrt(dim)

    adapter = _DualAveraging(step, config.target_accept)
    windows = _variance_checkpoints(config.n_warmup)
    window_iter = iter(windows)
    window = next(window_iter, None)
    acc = None

    # counters cover the sampling phase; warmup exploration is expected to
    # overshoot while the step size is being found
    divergences = 0
    neginf = 0
    warmup_accepts = 0

    def one_step(z, lp, grad, step):
        nonlocal divergences, neginf
        if hmc:
            return _hmc_step(vag_fn, z, lp, grad, step, inv_mass, config, rng)
        return _rwm_step(value_fn, z, lp, step, inv_mass, rng)

    def attempt_jumps(z, lp, grad):
        for move in config.jump_proposals:
            prop = np.asarray(move(z), dtype=float)
            if hmc:
                lp2, grad2 = vag_fn(prop)
            else:
                lp2, grad2 = value_fn(prop), None
            accept_prob = (
                math.exp(min(0.0, lp2 - lp)) if np.isfinite(lp2) else 0.0
            )
            if rng.random() < accept_prob:
                z, lp, grad = prop, lp2, grad2
        return z, lp, grad

    for it in range(config.n_warmup):
        if window is not None and it == window[0]:
            acc = _RunningVariance(dim)
        z, lp, grad, accepted, accept_prob, extra = one_step(z, lp, grad, step)
        z, lp, grad = attempt_jumps(z, lp, grad)
        warmup_accepts += accepted
        step = adapter.update(accept_prob)
        if acc is not None:
            acc.push(z)
        if window is not None and it + 1 == window[1]:
            inv_mass = acc.regularized()
            acc = None
            window = next(window_iter, None)
            adapter.restart(step)
    if warmup_accepts == 0:
        raise AdaptationFailureError("no proposal accepted during warmup")

    step = adapter.adapted_step
    out = np.empty((config.n_samples, dim))
    out_lp = np.empty(config.n_samples)
    accepts = 0
    for it in range(config.n_samples):
        z, lp, grad, accepted, _, extra = one_step(z, lp, grad, step)
        z, lp, grad = attempt_jumps(z, lp, grad)
        divergences += extra[0]
        neginf += extra[1]
        accepts += accepted
        out[it] = z
        out_lp[it] = lp
    return out, out_lp, accepts / config.n_samples, divergences, neginf, step


def _rwm_step(value_fn, z, lp, step, inv_mass, rng):
    scale = np.sqrt(inv_mass)
    prop = z + step * scale * rng.standard_normal(z.size)
    lp_prop = value_fn(prop)
    if not np.isfinite(lp_prop):
        return z, lp, None, 0, 0.0, (0, 1)
    accept_prob = min(1.0, math.exp(min(0.0, lp_prop - lp)))
    if rng.random() < accept_prob:
        return prop, lp_prop, None, 1, accept_prob, (0, 0)
    return z, lp, None, 0, accept_prob, (0, 0)


def _hmc_step(vag_fn, z, lp, grad, step, inv_mass, config, rng):
    d = z.size
    p0 = rng.standard_normal(d) / np.sqrt(inv_mass)
    max_steps = max(1, min(64, int(round(config.path_length / step))))
    n_leap = int(rng.integers(1, max_steps + 1))

    zc, pc, gc, lpc = z.copy(), p0.copy(), grad, lp
    ok = True
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_leap):
            pc = pc + 0.5 * step * gc
            zc = zc + step * inv_mass * pc
            lpc, gc = vag_fn(zc)
            if not np.isfinite(lpc) or not np.all(np.isfinite(gc)):
                ok = False
                break
            pc = pc + 0.5 * step * gc

        h0 = -lp + 0.5 * float(np.dot(p0 * p0, inv_mass))
        if not ok:
            return z, lp, grad, 0, 0.0, (1, 1)
        h1 = -lpc + 0.5 * float(np.dot(pc * pc, inv_mass))
        delta = h0 - h1
    if math.isnan(delta):
        return z, lp, grad, 0, 0.0, (1, 0)
    if delta < -1000.0:
        return z, lp, grad, 0, 0.0, (1, 0)
    accept_prob = min(1.0, math.exp(min(0.0, delta)))
    if rng.random() < accept_prob:
        return zc, lpc, gc, 1, accept_prob, (0, 0)
    return z, lp, grad, 0, accept_prob, (0, 0)


# --- diagnostics -----------------------------------------------------------


def _as_chain_array(draws) -> np.ndarray:
    arr = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("draws must have shape (n_chains, n_samples, dim)")
    return arr


def _split_chains(arr: np.ndarray) -> np.ndarray:
    m, n, d = arr.shape
    if m < 2 or n < 4:
        raise ValueError("need at least 2 chains of at least 4 draws")
    half = n // 2
    return np.concatenate((arr[:, :half], arr[:, half : 2 * half]), axis=0)


def split_rhat(draws) -> np.ndarray:
    """Split-chain potential scale reduction factor per dimension."""
    arr = _split_chains(_as_chain_array(draws))
    m, n, d = arr.shape
    chain_means = arr.mean(axis=1)                      # (m, d)
    chain_vars = arr.var(axis=1, ddof=1)                # (m, d)
    w = chain_vars.mean(axis=0)
    b = n * chain_means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    out = np.empty(d)
    for j in range(d):
        if var_plus[j] == 0.0:
            out[j] = 1.0
        elif w[j] == 0.0:
            out[j] = np.inf
        else:
            out[j] = math.sqrt(var_plus[j] / w[j])
    return out


def _rank_normalize(arr: np.ndarray) -> np.ndarray:
    m, n, d = arr.shape
    total = m * n
    out = np.empty_like(arr, dtype=float)
    for j in range(d):
        ranks = rankdata(arr[:, :, j], method="average", axis=None).reshape(m, n)
        out[:, :, j] = ndtri((ranks - 0.375) / (total + 0.25))
    return out


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT, lags 0..n-1."""
    m, n = x.shape
    centered = x - x.mean(axis=1, keepdims=True)
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def ess(draws) -> np.ndarray:
    """Rank-normalized bulk effective sample size per dimension."""
    arr = _split_chains(_as_chain_array(draws))
    arr = _rank_normalize(arr)
    m, n, d = arr.shape
    total = m * n
    out = np.empty(d)
    for j in range(d):
        x = arr[:, :, j]
        acov = _autocovariance(x)
        chain_var = acov[:, 0] * n / (n - 1)
        w = chain_var.mean()
        b = n * x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
        var_plus = (n - 1) / n * w + b / n
        if var_plus <= 0.0:
            out[j] = float(total)
            continue
        rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        # Geyer initial monotone positive sequence over lag pairs
        tau = 0.0
        prev = np.inf
        t = 0
        max_pairs = (n - 1) // 2
        for pair in range(max_pairs):
            p = rho[2 * pair] + rho[2 * pair + 1]
            if p <= 0.0:
                break
            p = min(p, prev)
            tau += p
            prev = p
            t += 1
        tau = max(2.0 * tau - 1.0, 1.0 / total)
        out[j] = min(float(total), total / tau)
    return out


def diagnose(draws) -> Diagnostics:
    return Diagnostics(rhat=split_rhat(draws), ess=ess(draws))


def posterior_summary(draws, constrain) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sd of each constrained latent over all pooled draws.

    ``constrain`` maps one unconstrained vector to a 1-D constrained
    vector; it is applied to every draw.
    """
    arr = _as_chain_array(draws)
    flat = arr.reshape(-1, arr.shape[2])
    first = np.asarray(constrain(flat[0]), dtype=float)
    values = np.empty((flat.shape[0], first.size))
    values[0] = first
    for i in range(1, flat.shape[0]):
        values[i] = constrain(flat[i])
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(first.size)
    return mean, sd


def save_draws_csv(draws: PosteriorDraws, path) -> None:
    """Dump all draws as CSV rows ``chain,draw,dim0,...`` for debugging."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["chain", "draw"] + [f"dim{j}" for j in range(draws.dim)]
        )
        for c in range(draws.n_chains):
            for i in range(draws.n_samples):
                writer.writerow(
                    [c, i] + [repr(float(v)) for v in draws.draws[c, i]]
                )
