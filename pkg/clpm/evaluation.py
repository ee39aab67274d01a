"""
Temporal network reconstruction benchmark and uncertainty analytics.

Reconstruction scores (pair, interval) triplets: every held-in or held-out pair that is active in an interval is a
positive, matched one to one with an inactive pair of the same split.  Scorers: the fitted model (plug-in mean
configuration or posterior-predictive mean), an unregularized per-interval latent distance model, preferential
attachment and random.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import linregress
from sklearn.metrics import roc_auc_score

from .events import interval_counts, interval_partners
from .exceptions import EvaluationError, ModelError
from .inference import Adam
from .model import (LatentConfiguration, RateKind, cumulative_rate, cumulative_rates, log_rate_from_positions,
                    positions, segment_rates)

log = logging.getLogger("clpm.evaluation")

SCORERS = ("tgne", "tgne-predictive", "lsdm", "pa", "random")
DEFAULT_DRAWS = 100


@dataclass
class ScoredInstance:
    i: int
    j: int
    k: int
    label: int
    score: float = None


@dataclass
class InstanceSet:
    instances: list
    shortfall: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def column(self, name, dtype=np.int64):
        return np.array([getattr(inst, name) for inst in self.instances], dtype=dtype)

    @property
    def labels(self):
        return self.column("label")

    def arrays(self):
        return self.column("i"), self.column("j"), self.column("k")

    def with_scores(self, scores):
        return [ScoredInstance(inst.i, inst.j, inst.k, inst.label, float(s))
                for inst, s in zip(self.instances, scores)]


def build_instances(counts, pairs, part, seed=None):
    """
    For every interval, each pair of `pairs` with an event in it is a positive and draws one negative uniformly,
    without replacement, among the pairs of `pairs` with no event in it.  Missing negatives are recorded per
    interval in `shortfall`.
    """
    keys = sorted({counts.key(*p) for p in pairs})
    rng = np.random.default_rng(seed)
    instances = []
    shortfall = {}
    if not keys:
        return InstanceSet(instances, shortfall)
    pi = np.array([a for a, _ in keys], dtype=np.int64)
    pj = np.array([b for _, b in keys], dtype=np.int64)
    for k in range(1, part.K + 1):
        active = counts.lookup(pi, pj, np.full(pi.size, k)) >= 1
        positives = np.flatnonzero(active)
        pool = np.flatnonzero(~active)
        take = min(positives.size, pool.size)
        negatives = rng.choice(pool, size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
        if take < positives.size:
            shortfall[k] = int(positives.size - take)
            log.warning(f"interval {k}: only {take} negatives for {positives.size} positives")
        instances.extend(ScoredInstance(int(pi[r]), int(pj[r]), k, 1) for r in positives)
        instances.extend(ScoredInstance(int(pi[r]), int(pj[r]), k, 0) for r in negatives)
    return InstanceSet(instances, shortfall)


def score_tgne(fm, i, j, k):
    """expected number of events of (i, j) in interval k under the posterior mean configuration"""
    return cumulative_rate(fm.mean_configuration(), fm.rate_model(), i, j, k, R=fm.hyper.riemann_R)


def tgne_scores(fm, i, j, k):
    """score_tgne for arrays of pairs and 1-based intervals"""
    values, _ = cumulative_rates(fm.state.mu, fm.part, fm.hyper.kind, fm.state.beta, np.asarray(i), np.asarray(j),
                                 np.asarray(k) - 1, R=fm.hyper.riemann_R)
    return values


def score_tgne_predictive(fm, i, j, k, B=DEFAULT_DRAWS, seed=None):
    """posterior-predictive mean E_q[Lambda_ij(I_k)] estimated from B draws"""
    mean, _ = edge_uncertainty(fm, i, j, k, B=B, seed=seed)
    return mean


@dataclass
class LsdmOptions:
    iterations: int = 1000
    lr: float = 0.05
    tol: float = 1e-7
    seed: int = 0
    # sampled zero pairs per positive; None fits against every zero pair
    negatives: int = None


@dataclass(eq=False)
class LsdmFit:
    k: int
    z: np.ndarray
    beta: float
    loss: float
    converged: bool
    iterations: int

    def score(self, i, j):
        delta = self.z[np.asarray(i)] - self.z[np.asarray(j)]
        return expit(self.beta - np.einsum("...d,...d->...", delta, delta))


def lsdm_objective(z, beta, i, j, y, w=None):
    """
    Negative Bernoulli log-likelihood sum w * [log(1 + exp(eta)) - y eta], eta = beta - ||z_i - z_j||^2, with its
    gradient with respect to z and beta.
    """
    w = np.ones(i.size) if w is None else w
    delta = z[i] - z[j]
    eta = beta - np.einsum("...d,...d->...", delta, delta)
    loss = float((w * (np.logaddexp(0.0, eta) - y * eta)).sum())
    g_eta = w * (expit(eta) - y)
    g_delta = -2 * g_eta[:, None] * delta
    dz = np.zeros_like(z)
    np.add.at(dz, i, g_delta)
    np.add.at(dz, j, -g_delta)
    return loss, dz, float(g_eta.sum())


def _universe(n, directed, excluded):
    if directed:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
    else:
        i, j = np.triu_indices(n, 1)
    if excluded:
        blocked = np.array([a * n + b for a, b in excluded], dtype=np.int64)
        keep = ~np.isin(i * n + j, blocked)
        i, j = i[keep], j[keep]
    return i, j


def fit_lsdm(counts, k, d=2, excluded=frozenset(), options=None):
    """
    Static latent distance model of interval k alone: y_ij = 1{N_ij(I_k) >= 1} over every pair that is not
    excluded, fitted with Adam.  counts must hold training pairs only.  Returns the best iterate.
    """
    options = options or LsdmOptions()
    rng = np.random.default_rng([options.seed, k])
    i, j = _universe(counts.n, counts.directed, excluded)
    if not i.size:
        raise EvaluationError("no pairs to fit the latent distance model on")
    y = (counts.lookup(i, j, np.full(i.size, k)) >= 1).astype(float)
    w = np.ones(i.size)
    if options.negatives is not None:
        zeros = np.flatnonzero(y == 0)
        take = min(zeros.size, options.negatives * max(int(y.sum()), 1))
        if take < zeros.size:
            kept = rng.choice(zeros, size=take, replace=False)
            rows = np.concatenate([np.flatnonzero(y == 1), kept])
            w = np.where(y[rows] == 1, 1.0, zeros.size / take)
            i, j, y = i[rows], j[rows], y[rows]
    params = {"z": 0.1 * rng.standard_normal((counts.n, d)), "beta": np.array(0.0)}
    optimizer = Adam(lr=options.lr)
    best = (np.inf, params["z"].copy(), 0.0)
    previous = np.inf
    converged = False
    iteration = 0
    for iteration in range(1, options.iterations + 1):
        loss, dz, dbeta = lsdm_objective(params["z"], float(params["beta"]), i, j, y, w)
        if loss < best[0]:
            best = (loss, params["z"].copy(), float(params["beta"]))
        if abs(previous - loss) <= options.tol * max(1.0, abs(loss)):
            converged = True
            break
        previous = loss
        optimizer.step(params, {"z": dz, "beta": dbeta})
    if not converged:
        log.warning(f"latent distance model for interval {k} did not converge in {options.iterations} iterations; "
                    f"keeping the best iterate (loss={best[0]:.6g})")
    return LsdmFit(k=k, z=best[1], beta=best[2], loss=best[0], converged=converged, iterations=iteration)


def score_pa(counts, i, j, k):
    """deg(i, k) * deg(j, k) from the (training) counts"""
    degrees = counts.degrees(k)
    return int(degrees[i] * degrees[j])


def pa_scores(counts, i, j, k):
    scores = np.zeros(len(i), dtype=float)
    k = np.asarray(k)
    for interval in np.unique(k):
        rows = k == interval
        degrees = counts.degrees(int(interval))
        scores[rows] = degrees[np.asarray(i)[rows]] * degrees[np.asarray(j)[rows]]
    return scores


def score_random(seed=None):
    return float(np.random.default_rng(seed).uniform())


def random_scores(count, seed=None):
    return np.random.default_rng(seed).uniform(size=count)


def auc_from_scores(labels, scores):
    labels = np.asarray(labels)
    if labels.size == 0 or np.all(labels == labels[0]):
        raise EvaluationError("AUC needs at least one positive and one negative instance")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=float)))


def auc(instances):
    """rank statistic of the scores of positives against negatives; ties count one half"""
    return auc_from_scores([inst.label for inst in instances], [inst.score for inst in instances])


def node_uncertainty(vs, i, k):
    """u(i, k): mean of the posterior scales at the two ends of interval k"""
    if not 1 <= k <= vs.K:
        raise ModelError(f"interval index {k} outside 1..{vs.K}")
    sigma = vs.sigma
    return float((sigma[i, k - 1] + sigma[i, k]) / 2)


def node_uncertainties(vs):
    """u(i, k) for every node and interval, shape (n, K)"""
    sigma = vs.sigma
    return (sigma[:, :-1] + sigma[:, 1:]) / 2


def uncertainty_over_time(vs, i):
    return [(k, node_uncertainty(vs, i, k)) for k in range(1, vs.K + 1)]


def neighbor_distance(fm, counts, i, k):
    """
    Mean distance at the midpoint of interval k between node i and the nodes it has events with in that interval,
    measured on the mean trajectories.  None when i has no such neighbor.
    """
    neighbors = np.unique(interval_partners(counts, i, k))
    if not neighbors.size:
        return None
    mid = float(fm.part.midpoints()[k - 1])
    cfg = fm.mean_configuration()
    here = positions(cfg, np.array([i]), np.array([mid]))[0]
    there = positions(cfg, neighbors, np.full(neighbors.size, mid))
    return float(np.linalg.norm(there - here, axis=1).mean())


def node_uncertainty_frame(fm, counts):
    """node,k,u,neighbor_dist,degree for every node and interval; neighbor_dist is empty without neighbors"""
    u = node_uncertainties(fm.state)
    rows = []
    for k in range(1, fm.part.K + 1):
        degrees = counts.degrees(k)
        for i in range(fm.n):
            dist = neighbor_distance(fm, counts, i, k)
            rows.append((fm.labels[i], k, u[i, k - 1], np.nan if dist is None else dist, int(degrees[i])))
    return pd.DataFrame(rows, columns=["node", "k", "u", "neighbor_dist", "degree"])


def edge_uncertainty(fm, i, j, k, B=DEFAULT_DRAWS, seed=None):
    """
    Mean and standard deviation (divisor B) of Lambda_ij(I_k) over B draws of the posterior.  Only the four critical
    points the rate depends on are sampled.
    """
    if B < 2:
        raise EvaluationError(f"need at least two posterior draws, got {B}")
    if i == j:
        raise ModelError(f"rate undefined for a self pair ({i}, {j})")
    vs = fm.state
    nodes = np.array([i, j])
    cut = np.array([k - 1, k])
    mu = vs.mu[nodes][:, cut]
    sigma = vs.sigma[nodes][:, cut]
    rng = np.random.default_rng(seed)
    z = mu[None] + sigma[None, ..., None] * rng.standard_normal((B,) + mu.shape)
    values, _ = segment_rates(z[:, 0, 0], z[:, 0, 1], z[:, 1, 0], z[:, 1, 1], fm.part.lengths[k - 1], vs.beta,
                              fm.hyper.kind, R=fm.hyper.riemann_R)
    return float(values.mean()), float(values.std())


def _posterior_draws(vs, B, seed):
    """B full configurations z ~ q, one derived stream per draw"""
    for child in np.random.SeedSequence(seed).spawn(B):
        eps = np.random.default_rng(child).standard_normal(vs.mu.shape)
        yield vs.mu + vs.sigma[..., None] * eps


def _running_moments(samples):
    """mean and population standard deviation of a stream of equally shaped arrays"""
    mean = m2 = None
    count = 0
    for x in samples:
        count += 1
        if mean is None:
            mean, m2 = np.array(x, dtype=float), np.zeros_like(x, dtype=float)
            continue
        delta = x - mean
        mean += delta / count
        m2 += delta * (x - mean)
    return mean, np.sqrt(m2 / count)


def edge_uncertainties(fm, i, j, k, B=DEFAULT_DRAWS, seed=None):
    """edge_uncertainty for arrays of pairs and 1-based intervals, sharing the B posterior draws"""
    if B < 2:
        raise EvaluationError(f"need at least two posterior draws, got {B}")
    i, j, k = np.asarray(i), np.asarray(j), np.asarray(k) - 1
    draws = (cumulative_rates(z, fm.part, fm.hyper.kind, fm.state.beta, i, j, k, R=fm.hyper.riemann_R)[0]
             for z in _posterior_draws(fm.state, B, seed))
    return _running_moments(draws)


def edge_uncertainty_frame(fm, counts, pairs, B=DEFAULT_DRAWS, seed=None):
    """i,j,k,N,lambda_mean,lambda_std over every given pair and every interval"""
    keys = sorted({counts.key(*p) for p in pairs})
    K = fm.part.K
    pi = np.repeat(np.array([a for a, _ in keys], dtype=np.int64), K)
    pj = np.repeat(np.array([b for _, b in keys], dtype=np.int64), K)
    pk = np.tile(np.arange(1, K + 1), len(keys))
    if not pi.size:
        return pd.DataFrame(columns=["i", "j", "k", "N", "lambda_mean", "lambda_std"])
    mean, std = edge_uncertainties(fm, pi, pj, pk, B=B, seed=seed)
    labels = np.asarray(fm.labels, dtype=object)
    return pd.DataFrame({"i": labels[pi], "j": labels[pj], "k": pk, "N": counts.lookup(pi, pj, pk),
                         "lambda_mean": mean, "lambda_std": std})


def regression_slope(ns, stds, per_unique=True):
    """
    OLS slope of the uncertainty against the event count.  With per_unique the regression points are the mean
    uncertainty of each distinct count.
    """
    ns = np.asarray(ns, dtype=float)
    stds = np.asarray(stds, dtype=float)
    unique = np.unique(ns)
    if unique.size < 2:
        raise EvaluationError("the regression needs at least two distinct event counts")
    if per_unique:
        stds = np.array([stds[ns == value].mean() for value in unique])
        ns = unique
    return float(linregress(ns, stds).slope)


def uncertainty_regression(fm, counts, pairs, B=DEFAULT_DRAWS, seed=None, per_unique=True):
    """
    slope of Std(Lambda) against N over `pairs` and all intervals.  Pass the train pairs of the split the model was
    fitted on; held-out pairs carry counts the model never saw.
    """
    frame = edge_uncertainty_frame(fm, counts, pairs, B=B, seed=seed)
    return regression_slope(frame["N"], frame["lambda_std"], per_unique=per_unique)


def rate_vs_uncertainty_table(ev, fm, B=DEFAULT_DRAWS, seed=None, counts=None):
    """
    Two records per event: the event itself and a negative with the destination swapped for a uniform random node
    other than both endpoints.  Each carries the mean-configuration log-rate at the event time, the standard
    deviation of the rate over B posterior draws and the pair's count in the containing interval.
    """
    if ev.n < 3:
        raise EvaluationError("swapping destinations needs at least three nodes")
    counts = counts if counts is not None else interval_counts(ev, fm.part)
    rng = np.random.default_rng(seed)
    E = len(ev)
    src, dst = ev.sources, ev.dests
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    swap = rng.integers(0, ev.n - 2, size=E)
    swap += swap >= lo
    swap += swap >= hi
    i = np.concatenate([src, src])
    j = np.concatenate([dst, swap])
    t = np.concatenate([ev.times, ev.times])
    k = fm.part.interval_of(t)
    kind = RateKind(fm.hyper.kind)

    def log_rates(z):
        cfg_z = LatentConfiguration(z, fm.part)
        return log_rate_from_positions(kind, fm.state.beta, positions(cfg_z, i, t), positions(cfg_z, j, t))

    mean_log_rate = log_rates(fm.state.mu)
    _, rate_std = _running_moments(np.exp(log_rates(z)) for z in _posterior_draws(fm.state, B, seed))
    labels = np.asarray(fm.labels, dtype=object)
    return pd.DataFrame({
        "event": np.concatenate([np.arange(E), np.arange(E)]),
        "is_negative": np.repeat([0, 1], E),
        "source": labels[i],
        "dest": labels[j],
        "t": t,
        "k": k,
        "log_rate": mean_log_rate,
        "rate_std": rate_std,
        "N": counts.lookup(i, j, k),
    })


def trajectory_displacement(vs):
    """mean distance between consecutive critical points of the mean trajectories"""
    return float(np.linalg.norm(np.diff(vs.mu, axis=1), axis=2).mean())


class ReconstructionBenchmark:
    """
    Scores the train and test instance sets of an edge split with every requested scorer.  Preferential attachment
    and the latent distance model only ever see the training pairs' counts.
    """

    def __init__(self, fm, ev, split, B=DEFAULT_DRAWS, seed=0, lsdm_options=None):
        self.fm = fm
        self.split = split
        self.B = B
        self.seed = seed
        self.lsdm_options = lsdm_options or LsdmOptions(seed=seed)
        self.counts = interval_counts(ev, fm.part)
        self.train_counts = self.counts.restrict(split.train)
        self._lsdm = {}

    def lsdm(self, k):
        if k not in self._lsdm:
            self._lsdm[k] = fit_lsdm(self.train_counts, k, d=self.fm.hyper.d, excluded=self.split.excluded,
                                     options=self.lsdm_options)
        return self._lsdm[k]

    def instances(self, name, stream=0):
        return build_instances(self.counts, getattr(self.split, name), self.fm.part, seed=[self.seed, stream])

    def scores(self, scorer, iset, stream=0):
        i, j, k = iset.arrays()
        if scorer == "tgne":
            return tgne_scores(self.fm, i, j, k)
        if scorer == "tgne-predictive":
            return edge_uncertainties(self.fm, i, j, k, B=self.B, seed=[self.seed, stream])[0]
        if scorer == "lsdm":
            scores = np.zeros(len(iset))
            for interval in np.unique(k):
                rows = k == interval
                scores[rows] = self.lsdm(int(interval)).score(i[rows], j[rows])
            return scores
        if scorer == "pa":
            return pa_scores(self.train_counts, i, j, k)
        if scorer == "random":
            return random_scores(len(iset), seed=[self.seed, stream])
        raise EvaluationError(f"unknown scorer {scorer!r}, expected one of {', '.join(SCORERS)}")

    def run(self, scorers=SCORERS, splits=("train", "test")):
        """(split -> scorer -> auc, instances frame)"""
        results = {}
        frames = []
        labels = np.asarray(self.fm.labels, dtype=object)
        for stream, name in enumerate(splits):
            iset = self.instances(name, stream)
            if not len(iset) or np.all(iset.labels == iset.labels[0]):
                log.warning(f"{name} split has no usable instances; skipped")
                continue
            i, j, k = iset.arrays()
            frame = pd.DataFrame({"split": name, "source": labels[i], "dest": labels[j], "k": k,
                                  "label": iset.labels})
            results[name] = {}
            for scorer in scorers:
                scores = self.scores(scorer, iset, stream)
                frame[scorer] = scores
                results[name][scorer] = auc(iset.with_scores(scores))
                log.info(f"{name} AUC {scorer}: {results[name][scorer]:.4f}")
            frames.append(frame)
        return results, (pd.concat(frames, ignore_index=True) if frames else pd.DataFrame())
