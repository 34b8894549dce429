"""Shared fixtures: canonical hyperparameter sets and prior state draws."""

from __future__ import annotations

import numpy as np
import pytest

from biaslearn.model import Hyperparams, LatentState


def make_hyper(
    alpha_domain=(3.0, 1.5),
    alpha_label=(0.8, 2.2),
    weight_loc=0.3,
    weight_scale=0.03,
    gamma=10.0,
    noise_var=1.0,
    n_features=2,
    n_categories=2,
) -> Hyperparams:
    return Hyperparams(
        alpha_domain=np.asarray(alpha_domain, dtype=float),
        alpha_label=np.asarray(alpha_label, dtype=float),
        weight_loc=weight_loc,
        weight_scale=weight_scale,
        gamma=gamma,
        noise_var=noise_var,
        n_features=n_features,
        n_categories=n_categories,
    )


@pytest.fixture
def hyper_free() -> Hyperparams:
    """Asymmetric concentrations, sampled domain weight."""
    return make_hyper()


@pytest.fixture
def hyper_pinned() -> Hyperparams:
    """Same shape with the domain weight pinned (weight_scale 0)."""
    return make_hyper(weight_scale=0.0)


def draw_state(hyper: Hyperparams, rng: np.random.Generator) -> LatentState:
    """Interior latent state drawn from (roughly) the prior.

    The weight is resampled until positive and the biases nudged off the
    boundary so the state survives unconstrain.
    """
    F, C = hyper.n_features, hyper.n_categories
    p = rng.dirichlet(hyper.alpha_domain)
    k = rng.dirichlet(hyper.alpha_label)
    p = (p + 1e-6) / (p + 1e-6).sum()
    k = (k + 1e-6) / (k + 1e-6).sum()
    if hyper.weight_is_free:
        omega = 0.0
        while omega <= 0:
            omega = rng.normal(hyper.weight_loc, hyper.weight_scale)
    else:
        omega = hyper.weight_loc
    sigma = np.abs(rng.normal(size=(F, C))) + 0.05
    mu = rng.normal(scale=1.5, size=(F, C))
    return LatentState(p, k, float(omega), sigma, mu)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20250814)
