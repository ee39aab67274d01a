"""
Gaussian random-walk prior over the critical points and its KL divergence from the mean-field posterior.

z_i^(0) ~ N(0, tau0^2 I) and z_i^(k) = z_i^(k-1) + tau_k eps with tau_k = tau * sqrt(eta_k - eta_{k-1}).
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .exceptions import ModelError
from .model import LatentConfiguration

log = logging.getLogger("clpm.prior")

# upper bound on the number of floats materialized per Monte-Carlo block
MC_BLOCK = 4_000_000


@dataclass(frozen=True, eq=False)
class PriorConfig:
    tau: float
    d: int
    part: object = None
    tau0: float = None

    def __post_init__(self):
        if self.tau0 is None:
            object.__setattr__(self, "tau0", self.tau)
        if not (self.tau > 0 and self.tau0 > 0):
            raise ModelError(f"prior scales must be positive, got tau={self.tau} tau0={self.tau0}")
        if self.d < 1:
            raise ModelError(f"latent dimension must be at least 1, got {self.d}")

    @property
    def K(self):
        # no partition means a single cut point
        return 0 if self.part is None else self.part.K

    @property
    def step_scales(self):
        if self.part is None:
            return np.zeros(0)
        return self.tau * np.sqrt(self.part.lengths)

    @property
    def scales(self):
        """scale of every cut point given its predecessor: tau0 first, then tau_1..tau_K"""
        return np.concatenate([[self.tau0], self.step_scales])


def _points(cfg):
    return np.asarray(getattr(cfg, "z", cfg), dtype=float)


def sample_prior(n, pc, seed=None):
    if n < 1:
        raise ModelError(f"need at least one node, got {n}")
    eps = np.random.default_rng(seed).standard_normal((n, pc.K + 1, pc.d))
    z = np.cumsum(eps * pc.scales[None, :, None], axis=1)
    if pc.part is None:
        return z
    return LatentConfiguration(z, pc.part)


def prior_log_density(cfg, pc):
    z = _points(cfg)
    if z.shape[1:] != (pc.K + 1, pc.d):
        raise ModelError(f"configuration shape {z.shape} does not match the prior (K={pc.K}, d={pc.d})")
    density = norm.logpdf(z[:, 0], loc=0.0, scale=pc.tau0).sum()
    if pc.K:
        density += norm.logpdf(z[:, 1:], loc=z[:, :-1], scale=pc.step_scales[None, :, None]).sum()
    return float(density)


def _sigma(vs):
    sigma = np.exp(np.asarray(vs.log_sigma, dtype=float))
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ModelError("variational scales must be finite and positive")
    return sigma


def kl_to_prior(vs, pc):
    """
    KL(q || p) for q = prod_i prod_k N(mu_i^(k), sigma_i^(k)^2 I_d) and the random-walk prior p, through the chain
    rule: KL(q_0 || p_0) + sum_k E_{q_{k-1}}[KL(q_k || p(. | z^(k-1)))].
    """
    mu = np.asarray(vs.mu, dtype=float)
    sigma = _sigma(vs)
    d = mu.shape[2]
    scales = pc.scales
    var = scales ** 2
    kl = (mu[:, 0] ** 2).sum() / (2 * var[0])
    kl += d * (np.log(scales[None, :] / sigma) + sigma ** 2 / (2 * var[None, :]) - 0.5).sum()
    if pc.K:
        step = ((mu[:, 1:] - mu[:, :-1]) ** 2).sum(axis=2)
        kl += ((step + d * sigma[:, :-1] ** 2) / (2 * var[None, 1:])).sum()
    return float(kl)


def kl_gradient(vs, pc):
    """derivatives of kl_to_prior with respect to mu and log_sigma"""
    mu = np.asarray(vs.mu, dtype=float)
    sigma = _sigma(vs)
    d = mu.shape[2]
    var = pc.scales ** 2
    d_mu = np.zeros_like(mu)
    d_mu[:, 0] = mu[:, 0] / var[0]
    d_log_sigma = d * (sigma ** 2 / var[None, :] - 1)
    if pc.K:
        g = (mu[:, 1:] - mu[:, :-1]) / var[None, 1:, None]
        d_mu[:, 1:] += g
        d_mu[:, :-1] -= g
        d_log_sigma[:, :-1] += d * sigma[:, :-1] ** 2 / var[None, 1:]
    return d_mu, d_log_sigma


def kl_monte_carlo(vs, pc, S, seed=None):
    """mean and standard error of log q(z) - log p(z) over S draws z ~ q"""
    if S < 1:
        raise ModelError(f"need at least one Monte-Carlo draw, got {S}")
    mu = np.asarray(vs.mu, dtype=float)
    sigma = _sigma(vs)[..., None]
    rng = np.random.default_rng(seed)
    block = max(1, MC_BLOCK // mu.size)
    mean = 0.0
    m2 = 0.0
    drawn = 0
    while drawn < S:
        size = min(block, S - drawn)
        z = mu[None] + sigma[None] * rng.standard_normal((size,) + mu.shape)
        log_q = norm.logpdf(z, loc=mu[None], scale=sigma[None]).sum(axis=(1, 2, 3))
        log_p = norm.logpdf(z[:, :, 0], loc=0.0, scale=pc.tau0).sum(axis=(1, 2))
        if pc.K:
            log_p += norm.logpdf(z[:, :, 1:], loc=z[:, :, :-1],
                                 scale=pc.step_scales[None, None, :, None]).sum(axis=(1, 2, 3))
        diff = log_q - log_p
        # pairwise merge of block mean and sum of squares
        block_mean = diff.mean()
        delta = block_mean - mean
        merged = drawn + size
        mean += delta * size / merged
        m2 += ((diff - block_mean) ** 2).sum() + delta ** 2 * drawn * size / merged
        drawn = merged
    if S == 1:
        return float(mean), float("inf")
    variance = m2 / (S - 1)
    return float(mean), float(np.sqrt(variance / S))
