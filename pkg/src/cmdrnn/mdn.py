"""Mixture-density output head over 2-D targets.

A raw network output of length ``5K`` is laid out as ``K`` weight logits,
then ``2K`` means (component-major: ``mu[k] = raw[K + 2k : K + 2k + 2]``),
then ``2K`` log-scales.  Components have diagonal covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DomainError, Node, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
PARAMS_PER_COMPONENT = 5


@dataclass
class MixtureParams:
    """Weights ``pi`` [..., K], means ``mu`` [..., K, 2], scales ``sigma`` [..., K, 2].

    ``log_pi`` and ``log_sigma`` are carried alongside so the likelihood never
    has to take the log of an exponentiated quantity.
    """

    pi: Node
    mu: Node
    sigma: Node
    log_pi: Node
    log_sigma: Node

    @property
    def K(self) -> int:
        return self.pi.shape[-1]

    @classmethod
    def from_arrays(cls, pi, mu, sigma) -> "MixtureParams":
        pi, mu, sigma = (np.asarray(a, dtype=float) for a in (pi, mu, sigma))
        if np.any(sigma <= 0):
            raise DomainError("mixture scales must be positive")
        if np.any(pi <= 0) or np.any(pi > 1):
            raise DomainError("mixture weights must lie in (0, 1]")
        if not np.allclose(pi.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
            raise DomainError("mixture weights must sum to one")
        if mu.shape != sigma.shape or mu.shape != pi.shape + (2,):
            raise ShapeError(f"inconsistent mixture shapes pi{pi.shape} mu{mu.shape} sigma{sigma.shape}")
        return cls(T.constant(pi), T.constant(mu), T.constant(sigma), T.constant(np.log(pi)), T.constant(np.log(sigma)))

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.pi.value, self.mu.value, self.sigma.value


def split_theta(raw) -> MixtureParams:
    """Map a raw vector [5K] (or batch [B, 5K]) onto mixture parameters."""
    raw = T.lift(raw)
    n = raw.shape[-1]
    if raw.ndim not in (1, 2) or n % PARAMS_PER_COMPONENT:
        raise ShapeError(f"raw mixture output must have length divisible by 5, got shape {raw.shape}")
    k = n // PARAMS_PER_COMPONENT
    lead = raw.shape[:-1]
    axis = raw.ndim - 1
    log_pi = T.log_softmax(T.slice_axis(raw, axis, 0, k), axis=-1)
    mu = T.reshape(T.slice_axis(raw, axis, k, 3 * k), lead + (k, 2))
    log_sigma = T.reshape(T.slice_axis(raw, axis, 3 * k, 5 * k), lead + (k, 2))
    return MixtureParams(T.exp(log_pi), mu, T.exp(log_sigma), log_pi, log_sigma)


def component_log_density(p: MixtureParams, y) -> Node:
    """``log N(y; mu_k, diag(sigma_k^2))`` for each component, shape [..., K]."""
    y = T.lift(y)
    if y.shape != p.mu.shape[:-2] + (2,):
        raise ShapeError(f"target shape {y.shape} does not match mixture means {p.mu.shape}")
    if np.any(p.sigma.value <= 0):
        raise DomainError("mixture scales must be positive")
    lead = y.shape[:-1]
    y_k = T.broadcast_to(T.reshape(y, lead + (1, 2)), p.mu.shape)
    z = (y_k - p.mu) * T.exp(-p.log_sigma)
    per_dim = -0.5 * T.square(z) - p.log_sigma
    return T.sum(per_dim, axis=-1) - LOG_2PI


def nll(p: MixtureParams, y) -> Node:
    """Negative log-likelihood of ``y`` under the mixture, via log-sum-exp.

    For batched parameters the result is a vector of per-sample losses.
    """
    return -T.logsumexp(p.log_pi + component_log_density(p, y), axis=-1)


def naive_nll(pi, mu, sigma, y) -> float:
    """Direct density evaluation, no log-space tricks.  Reference only."""
    pi, mu, sigma, y = (np.asarray(a, dtype=float) for a in (pi, mu, sigma, y))
    dens = np.exp(-0.5 * ((y - mu) / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma)
    return float(-np.log(np.sum(pi * dens.prod(axis=-1))))


def sample(p: MixtureParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one point per mixture: pick a component by weight, then each axis independently."""
    pi, mu, sigma = p.numpy()
    flat_pi = pi.reshape(-1, pi.shape[-1])
    flat_mu = mu.reshape(-1, *mu.shape[-2:])
    flat_sigma = sigma.reshape(-1, *sigma.shape[-2:])
    u = rng.random(flat_pi.shape[0])
    cdf = np.cumsum(flat_pi, axis=-1)
    k = np.minimum((u[:, None] >= cdf).sum(axis=-1), flat_pi.shape[-1] - 1)
    rows = np.arange(flat_pi.shape[0])
    noise = rng.standard_normal((flat_pi.shape[0], 2))
    out = flat_mu[rows, k] + flat_sigma[rows, k] * noise
    return out.reshape(pi.shape[:-1] + (2,))


def sample_many(p: MixtureParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws from a single (unbatched) mixture; returns points and component indices."""
    pi, mu, sigma = p.numpy()
    if pi.ndim != 1:
        raise ShapeError("sample_many expects an unbatched mixture")
    k = rng.choice(pi.shape[0], size=n, p=pi)
    return mu[k] + sigma[k] * rng.standard_normal((n, 2)), k


def predict_mle(p: MixtureParams, mode: str = "mle", rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Point prediction from a mixture.

    ``mle`` returns the mean of the heaviest component (lowest index on ties),
    ``mixture-mean`` the weighted mean of all components, and ``sample`` one
    random draw (needs ``rng``).
    """
    pi, mu, _ = p.numpy()
    if mode == "mle":
        k = np.argmax(pi, axis=-1)
        return np.take_along_axis(mu, k[..., None, None], axis=-2)[..., 0, :]
    if mode == "mixture-mean":
        return np.sum(pi[..., None] * mu, axis=-2)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        return sample(p, rng)
    raise ValueError(f"unknown prediction mode {mode!r}")


def density_upper_bound(p: MixtureParams) -> np.ndarray:
    pi, _, sigma = p.numpy()
    return np.sum(pi / (2 * np.pi * sigma[..., 0] * sigma[..., 1]), axis=-1)
