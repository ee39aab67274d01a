"""
Continuous latent position model: piecewise-linear trajectories, pairwise Poisson rates and their integrals over the
partition intervals, and the point-process negative log-likelihood.

Conventions used throughout: interval indices are 1-based in the public operations (interval k is
[eta_{k-1}, eta_k]); arrays are 0-based, so interval k uses critical points z[:, k - 1] and z[:, k].
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import exprel, log_ndtr, ndtr

from .events import interval_counts, interval_partners, sample_negative_pairs
from .exceptions import ModelError

log = logging.getLogger("clpm.model")

EPS_DEGENERATE = 1e-9
# below this norm of the direction the closed form loses its digits to mu and sigma
NEAR_LINEAR = 1e-3
GAUSS_NODES, GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(64)
GAUSS_S = (GAUSS_NODES + 1) / 2
GAUSS_W = GAUSS_WEIGHTS / 2
DEFAULT_RIEMANN_R = 10
LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
# cap on intermediate (pairs x riemann steps) blocks
RIEMANN_BLOCK = 2_000_000


class RateKind(str, Enum):
    EUCLIDEAN = "euclidean"
    DOT_PRODUCT = "dot-product"


@dataclass(frozen=True)
class RateModel:
    kind: RateKind = RateKind.EUCLIDEAN
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", RateKind(self.kind))


@dataclass(frozen=True, eq=False)
class LatentConfiguration:
    z: np.ndarray
    part: object

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 3 or z.shape[1] != self.part.K + 1:
            raise ModelError(f"critical points must have shape (n, K+1, d) with K={self.part.K}, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ModelError("critical points must be finite")
        object.__setattr__(self, "z", z)

    @property
    def n(self):
        return self.z.shape[0]

    @property
    def d(self):
        return self.z.shape[2]


def normal_cdf(x):
    return ndtr(x)


def log_normal_cdf_diff(hi, lo):
    """log(Phi(hi) - Phi(lo)) for hi > lo, evaluated on the complementary side when lo > 0 to avoid cancellation"""
    hi, lo = np.broadcast_arrays(np.asarray(hi, dtype=float), np.asarray(lo, dtype=float))
    flip = lo > 0
    upper = np.where(flip, -lo, hi)
    lower = np.where(flip, -hi, lo)
    log_upper = log_ndtr(upper)
    return log_upper + np.log(-np.expm1(log_ndtr(lower) - log_upper))


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
        raise ModelError(f"time outside [0, 1]: {t}")
    return t


def _interpolation(part, t):
    """0-based interval index and the fraction s in [0, 1] of t inside it"""
    k = part.interval_of(t) - 1
    s = (t - part.eta[k]) / part.lengths[k]
    return k, s


def positions(cfg, nodes, t):
    """z_i(t) for arrays of nodes and times"""
    t = _check_time(t)
    nodes = np.asarray(nodes)
    k, s = _interpolation(cfg.part, t)
    s = s[..., None]
    return (1 - s) * cfg.z[nodes, k] + s * cfg.z[nodes, k + 1]


def position_at(cfg, i, t):
    return positions(cfg, np.array([i]), np.array([t], dtype=float))[0]


def log_rate_from_positions(kind, beta, zi, zj):
    if kind == RateKind.EUCLIDEAN:
        delta = zi - zj
        return beta - np.einsum("...d,...d->...", delta, delta)
    return beta + np.einsum("...d,...d->...", zi, zj)


def log_rate(cfg, rm, i, j, t):
    if i == j:
        raise ModelError(f"rate undefined for a self pair ({i}, {j})")
    zi = position_at(cfg, i, t)
    zj = position_at(cfg, j, t)
    return float(log_rate_from_positions(rm.kind, rm.beta, zi, zj))


def _quadrature_log_integral(A, B):
    """
    log int_0^1 exp(-(2 B s + A s^2)) ds with the first two moments of s under the normalized integrand, by
    Gauss-Legendre quadrature.  Every weight is positive, so nothing cancels when mu and sigma of the closed form
    blow up.
    """
    expo = -(2 * B[:, None] * GAUSS_S + A[:, None] * GAUSS_S ** 2)
    top = expo.max(axis=1, keepdims=True)
    w = GAUSS_W * np.exp(expo - top)
    total = w.sum(axis=1)
    return top[:, 0] + np.log(total), (w * GAUSS_S).sum(axis=1) / total, (w * GAUSS_S ** 2).sum(axis=1) / total


def segment_log_integral(delta_a, delta_b, with_grad=False, eps_degenerate=EPS_DEGENERATE):
    """
    log of I = int_0^1 exp(-||delta_a + s (delta_b - delta_a)||^2) ds.

    The exponent is a quadratic a + (s - mu)^2 / (2 sigma^2) in s, so I is a Gaussian mass over [0, 1]:
    I = exp(-a) sigma sqrt(2 pi) [Phi((1 - mu) / sigma) - Phi(-mu / sigma)].
    When ||delta_b - delta_a|| < eps_degenerate the quadratic term is dropped and the exponent is linear in s.
    Between that and NEAR_LINEAR, mu and sigma are too large for the closed form to keep its digits, and I comes
    from quadrature instead.

    With with_grad the derivatives of log I with respect to delta_a and delta_b are returned as well; they only
    need the first two moments of s under the normalized integrand.
    """
    delta_a = np.asarray(delta_a, dtype=float)
    delta_b = np.asarray(delta_b, dtype=float)
    diff = delta_b - delta_a
    A = np.asarray(np.einsum("...d,...d->...", diff, diff))
    B = np.asarray(np.einsum("...d,...d->...", delta_a, diff))
    qa = np.asarray(np.einsum("...d,...d->...", delta_a, delta_a))
    qb = np.einsum("...d,...d->...", delta_b, delta_b)
    degenerate = np.asarray(np.sqrt(A) < eps_degenerate)
    near = np.asarray(np.sqrt(A) < max(NEAR_LINEAR, eps_degenerate))

    A_safe = np.where(near, 1.0, A)
    mu = -B / A_safe
    sigma2 = 0.5 / A_safe
    sigma = np.sqrt(sigma2)
    a = np.maximum(qa - B * B / A_safe, 0.0)
    log_closed = -a + np.log(sigma) + LOG_SQRT_2PI + log_normal_cdf_diff((1 - mu) / sigma, -mu / sigma)
    c1 = 2 * B
    log_linear = -qa + np.log(exprel(-c1))
    log_I = np.where(degenerate, log_linear, log_closed)

    # quadratic term dropped on the degenerate branch, kept in the rest of the near-linear band
    A_near = np.where(degenerate, 0.0, A)[near]
    log_near, m1_near, m2_near = _quadrature_log_integral(A_near, B[near])
    band = np.asarray(near & ~degenerate)
    log_I[band] = -qa[band] + log_near[~degenerate[near]]
    if not with_grad:
        return log_I

    # moments of s under exp(-q(s)) / I on [0, 1]
    dq = 2 * B + A
    r0 = np.exp(-qa - log_I)
    r1 = np.exp(-qb - log_I)
    # (E0 - E1) / I without cancellation when the endpoint exponents are close
    r0_diff = np.where(np.abs(dq) < 1, r0 * -np.expm1(-np.clip(dq, -1, 1)), r0 - r1)
    m1 = np.array(mu + sigma2 * r0_diff, dtype=float)
    m2 = np.array(mu * m1 + sigma2 * (1 - r1), dtype=float)
    m1[near] = m1_near
    m2[near] = m2_near
    m1 = m1[..., None]
    m2 = m2[..., None]
    grad_a = -2 * (delta_a * (1 - m1) + diff * (m1 - m2))
    grad_b = -2 * (delta_a * m1 + diff * m2)
    return log_I, grad_a, grad_b


def _closed_form(zi_a, zi_b, zj_a, zj_b, length, beta, with_grad):
    result = segment_log_integral(zi_a - zj_a, zi_b - zj_b, with_grad=with_grad)
    if not with_grad:
        return length * np.exp(beta + result), None
    log_I, grad_a, grad_b = result
    lam = length * np.exp(beta + log_I)
    g_ia = lam[:, None] * grad_a
    g_ib = lam[:, None] * grad_b
    return lam, (g_ia, g_ib, -g_ia, -g_ib)


def _riemann(zi_a, zi_b, zj_a, zj_b, length, beta, kind, R, with_grad):
    """left Riemann sum with R equal sub-steps of each interval"""
    m, d = zi_a.shape
    total = np.zeros(m)
    grads = [np.zeros((m, d)) for _ in range(4)] if with_grad else None
    step = max(1, RIEMANN_BLOCK // max(m, 1))
    for start in range(0, R, step):
        s = np.arange(start, min(R, start + step)) / R
        sv = s[None, :, None]
        zi = zi_a[:, None, :] + sv * (zi_b - zi_a)[:, None, :]
        zj = zj_a[:, None, :] + sv * (zj_b - zj_a)[:, None, :]
        w = (length[:, None] / R) * np.exp(log_rate_from_positions(kind, beta, zi, zj))
        total += w.sum(axis=1)
        if with_grad:
            if kind == RateKind.EUCLIDEAN:
                gi = -2 * (zi - zj)
                gj = -gi
            else:
                gi, gj = zj, zi
            wa = (w * (1 - s))[..., None]
            wb = (w * s)[..., None]
            grads[0] += (wa * gi).sum(axis=1)
            grads[1] += (wb * gi).sum(axis=1)
            grads[2] += (wa * gj).sum(axis=1)
            grads[3] += (wb * gj).sum(axis=1)
    return total, grads


def cumulative_rates(z, part, kind, beta, i, j, k, R=DEFAULT_RIEMANN_R, method=None, with_grad=False):
    """
    Lambda_ij(I_k) for arrays of pairs and 0-based intervals k.  The euclidean model uses the closed form unless
    method="riemann"; the dot-product model always uses the Riemann sum.
    Returns (values, grads) where grads, when requested, are the derivatives with respect to
    z[i, k], z[i, k + 1], z[j, k], z[j, k + 1].
    """
    return segment_rates(z[i, k], z[i, k + 1], z[j, k], z[j, k + 1], part.lengths[k], beta, kind, R=R,
                         method=method, with_grad=with_grad)


def segment_rates(zi_a, zi_b, zj_a, zj_b, length, beta, kind, R=DEFAULT_RIEMANN_R, method=None, with_grad=False):
    """cumulative rates over segments of the given lengths, from the endpoint positions of both nodes"""
    kind = RateKind(kind)
    zi_a, zi_b, zj_a, zj_b = (np.asarray(x, dtype=float) for x in (zi_a, zi_b, zj_a, zj_b))
    length = np.broadcast_to(np.asarray(length, dtype=float), zi_a.shape[:-1])
    if method is None:
        method = "closed" if kind == RateKind.EUCLIDEAN else "riemann"
    if method == "closed":
        if kind != RateKind.EUCLIDEAN:
            raise ModelError("the closed form only exists for the euclidean distance model")
        return _closed_form(zi_a, zi_b, zj_a, zj_b, length, beta, with_grad)
    if R < 1:
        raise ModelError(f"Riemann resolution must be at least 1, got {R}")
    return _riemann(zi_a, zi_b, zj_a, zj_b, length, beta, kind, R, with_grad)


def _check_interval(cfg, i, j, k):
    if i == j:
        raise ModelError(f"rate undefined for a self pair ({i}, {j})")
    if not 1 <= k <= cfg.part.K:
        raise ModelError(f"interval index {k} outside 1..{cfg.part.K}")


def cumulative_rate_closed(cfg, rm, i, j, k):
    if RateKind(rm.kind) != RateKind.EUCLIDEAN:
        raise ModelError("the closed form only exists for the euclidean distance model")
    _check_interval(cfg, i, j, k)
    values, _ = cumulative_rates(cfg.z, cfg.part, rm.kind, rm.beta, np.array([i]), np.array([j]),
                                 np.array([k - 1]), method="closed")
    return float(values[0])


def cumulative_rate_riemann(cfg, rm, i, j, k, R=DEFAULT_RIEMANN_R):
    _check_interval(cfg, i, j, k)
    values, _ = cumulative_rates(cfg.z, cfg.part, rm.kind, rm.beta, np.array([i]), np.array([j]),
                                 np.array([k - 1]), R=R, method="riemann")
    return float(values[0])


def cumulative_rate(cfg, rm, i, j, k, R=DEFAULT_RIEMANN_R):
    if RateKind(rm.kind) == RateKind.EUCLIDEAN:
        return cumulative_rate_closed(cfg, rm, i, j, k)
    return cumulative_rate_riemann(cfg, rm, i, j, k, R)


def pair_interval_nll(cfg, rm, i, j, k, times, R=DEFAULT_RIEMANN_R):
    """Lambda_ij(I_k) - sum of log lambda_ij(t) over the given event times of the pair inside I_k"""
    _check_interval(cfg, i, j, k)
    times = _check_time(np.atleast_1d(np.asarray(times, dtype=float)))
    lo, hi = cfg.part.bounds(k)
    if np.any((times < lo) | (times > hi)):
        raise ModelError(f"event times must lie in interval {k} = [{lo}, {hi}]")
    survival = cumulative_rate(cfg, rm, i, j, k, R)
    if not times.size:
        return survival
    s = ((times - lo) / (hi - lo))[:, None]
    zi = (1 - s) * cfg.z[i, k - 1] + s * cfg.z[i, k]
    zj = (1 - s) * cfg.z[j, k - 1] + s * cfg.z[j, k]
    return survival - float(log_rate_from_positions(RateKind(rm.kind), rm.beta, zi, zj).sum())


@dataclass(eq=False)
class SamplingPlan:
    """
    Weighted likelihood terms to evaluate: survival terms w * Lambda_ij(I_k) over (pair, interval) rows and event
    terms w * log lambda_ij(t) over event rows.  Interval indices here are 0-based.
    """
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_k: np.ndarray
    pair_w: np.ndarray
    event_i: np.ndarray
    event_j: np.ndarray
    event_t: np.ndarray
    event_k: np.ndarray
    event_w: np.ndarray
    mode: str = "full"

    @classmethod
    def full(cls, ev, part, excluded=frozenset()):
        """every non-excluded pair over every interval, every event of a non-excluded pair, all with weight 1"""
        if ev.directed:
            i, j = np.nonzero(~np.eye(ev.n, dtype=bool))
        else:
            i, j = np.triu_indices(ev.n, 1)
        if excluded:
            codes = np.array([a * ev.n + b for a, b in (ev.key(*p) for p in excluded)], dtype=np.int64)
            keep = ~np.isin(i * ev.n + j, codes)
            i, j = i[keep], j[keep]
            ev = ev.restrict(excluded, keep=False)
        K = part.K
        ek = part.interval_of(ev.times) - 1
        return cls(np.repeat(i, K), np.repeat(j, K), np.tile(np.arange(K), i.size), np.ones(i.size * K),
                   ev.sources, ev.dests, ev.times, ek, np.ones(len(ev)), mode="full")

    @classmethod
    def sampled(cls, ev, part, negatives=None, batch=None, excluded=frozenset(), seed=None, per_interval=False,
                counts=None):
        """
        Node-centric plan.  Each source node contributes its exact positive pairs and events, plus either all of its
        never-interacting pairs (negatives=None) or a sample of them reweighted by pool size / sample size.
        With batch, only a random subset of source nodes contributes and the result is scaled by n / |batch|.
        Undirected pairs are seen from both endpoints, so each side carries half the weight.
        """
        rng = np.random.default_rng(seed)
        n, K = ev.n, part.K
        train = ev.restrict(excluded, keep=False) if excluded else ev
        if batch is not None and batch < n:
            sources = np.sort(rng.choice(n, size=batch, replace=False))
        else:
            sources = np.arange(n)
        weight = (1.0 if ev.directed else 0.5) * n / sources.size
        if per_interval and counts is None:
            counts = interval_counts(train, part)
        by_node = _events_by_node(train)
        excluded_by_node = _partners_in(excluded, n, ev.directed)
        rows = {"i": [], "j": [], "k": [], "w": []}
        event_rows = []

        def add(i, js, ks, w):
            rows["i"].append(np.full(js.size, i))
            rows["j"].append(js)
            rows["k"].append(ks)
            rows["w"].append(np.full(js.size, w))

        every_k = np.arange(K)
        for i in sources:
            i = int(i)
            event_rows.append(by_node[i])
            if not per_interval:
                positives = train.partners[i]
                add(i, np.repeat(positives, K), np.tile(every_k, positives.size), weight)
                pool = _pool(n, i, positives, excluded_by_node[i])
                if negatives is None:
                    add(i, np.repeat(pool, K), np.tile(every_k, pool.size), weight)
                elif pool.size:
                    drawn = sample_negative_pairs(train, i, negatives, excluded, rng)
                    js = drawn.nodes
                    add(i, np.repeat(js, K), np.tile(every_k, js.size), weight * drawn.pool_size / js.size)
                continue
            for k in range(1, K + 1):
                active = interval_partners(counts, i, k)
                add(i, active, np.full(active.size, k - 1), weight)
                if negatives is None:
                    pool = _pool(n, i, active, excluded_by_node[i])
                    add(i, pool, np.full(pool.size, k - 1), weight)
                    continue
                drawn = sample_negative_pairs(train, i, negatives, excluded, rng, interval=k, counts=counts)
                if drawn.pool_size:
                    js = drawn.nodes
                    add(i, js, np.full(js.size, k - 1), weight * drawn.pool_size / js.size)

        cat = lambda parts, dtype: np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)  # noqa
        idx = cat(event_rows, np.int64)
        mode = "negative" if negatives is not None else ("batch" if sources.size < n else "node")
        return cls(cat(rows["i"], np.int64), cat(rows["j"], np.int64), cat(rows["k"], np.int64),
                   cat(rows["w"], float), train.sources[idx], train.dests[idx], train.times[idx],
                   part.interval_of(train.times[idx]) - 1, np.full(idx.size, weight), mode=mode)


def _events_by_node(ev):
    if ev.directed:
        nodes, idx = ev.sources, np.arange(len(ev))
    else:
        nodes = np.concatenate([ev.sources, ev.dests])
        idx = np.concatenate([np.arange(len(ev)), np.arange(len(ev))])
    result = {i: np.zeros(0, dtype=np.int64) for i in range(ev.n)}
    if idx.size:
        order = np.argsort(nodes, kind="stable")
        nodes, idx = nodes[order], idx[order]
        found, starts = np.unique(nodes, return_index=True)
        for node, chunk in zip(found, np.split(idx, starts[1:])):
            result[int(node)] = chunk
    return result


def _partners_in(pairs, n, directed):
    result = {i: [] for i in range(n)}
    for a, b in pairs:
        result[a].append(b)
        if not directed:
            result[b].append(a)
    return {i: np.array(js, dtype=np.int64) for i, js in result.items()}


def _pool(n, i, positives, excluded):
    blocked = np.zeros(n, dtype=bool)
    blocked[i] = True
    blocked[positives] = True
    blocked[excluded] = True
    return np.flatnonzero(~blocked)


@dataclass
class NllResult:
    value: float
    survival: float
    events: float
    dz: np.ndarray = None
    dbeta: float = None


def _survival_chunk(z, part, kind, beta, plan, rows, R, with_grad):
    i, j, k, w = plan.pair_i[rows], plan.pair_j[rows], plan.pair_k[rows], plan.pair_w[rows]
    values, grads = cumulative_rates(z, part, kind, beta, i, j, k, R=R, with_grad=with_grad)
    weighted = w * values
    if not with_grad:
        return weighted.sum(), None
    dz = np.zeros_like(z)
    wv = w[:, None]
    np.add.at(dz, (i, k), wv * grads[0])
    np.add.at(dz, (i, k + 1), wv * grads[1])
    np.add.at(dz, (j, k), wv * grads[2])
    np.add.at(dz, (j, k + 1), wv * grads[3])
    return weighted.sum(), dz


def evaluate_nll(z, beta, kind, part, plan, R=DEFAULT_RIEMANN_R, with_grad=False, threads=1):
    """
    Weighted negative log-likelihood of a configuration under a sampling plan, optionally with its gradient with
    respect to the critical points and beta.  Survival rows are split into `threads` chunks whose partial sums are
    reduced in chunk order.
    """
    kind = RateKind(kind)
    chunks = np.array_split(np.arange(plan.pair_i.size), max(1, int(threads)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda rows: _survival_chunk(z, part, kind, beta, plan, rows, R, with_grad),
                                  chunks))
    else:
        parts = [_survival_chunk(z, part, kind, beta, plan, rows, R, with_grad) for rows in chunks]
    survival = float(sum(value for value, _ in parts))

    i, j, k, w = plan.event_i, plan.event_j, plan.event_k, plan.event_w
    s = ((plan.event_t - part.eta[k]) / part.lengths[k])[:, None]
    zi = (1 - s) * z[i, k] + s * z[i, k + 1]
    zj = (1 - s) * z[j, k] + s * z[j, k + 1]
    log_lam = log_rate_from_positions(kind, beta, zi, zj)
    events = float((w * log_lam).sum())
    result = NllResult(value=survival - events, survival=survival, events=events)
    if not with_grad:
        return result

    dz = np.zeros_like(z)
    for _, part_dz in parts:
        if part_dz is not None:
            dz += part_dz
    if kind == RateKind.EUCLIDEAN:
        gi = -2 * (zi - zj)
        gj = -gi
    else:
        gi, gj = zj, zi
    wv = w[:, None]
    np.add.at(dz, (i, k), -wv * (1 - s) * gi)
    np.add.at(dz, (i, k + 1), -wv * s * gi)
    np.add.at(dz, (j, k), -wv * (1 - s) * gj)
    np.add.at(dz, (j, k + 1), -wv * s * gj)
    result.dz = dz
    result.dbeta = survival - float(w.sum())
    return result


def total_nll(cfg, rm, ev, part=None, plan=None, R=DEFAULT_RIEMANN_R, threads=1):
    part = part or cfg.part
    if plan is None:
        plan = SamplingPlan.full(ev, part)
    return evaluate_nll(cfg.z, rm.beta, rm.kind, part, plan, R=R, threads=threads).value
