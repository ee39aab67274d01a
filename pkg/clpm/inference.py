"""
Mean-field variational inference for the latent position model.

q(z) = prod_i prod_k N(mu_i^(k), sigma_i^(k)^2 I_d) is fitted by minimizing the negative ELBO
(reconstruction NLL at a reparameterized sample plus KL to the random-walk prior) with Adam.
"""
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd
from django.core.serializers.json import DjangoJSONEncoder

from .events import IntervalPartition, dataset_stats, interval_counts, window_degrees
from .exceptions import ConfigError, DataError, ModelError, NonFiniteLossError
from .model import DEFAULT_RIEMANN_R, LatentConfiguration, RateKind, RateModel, SamplingPlan, evaluate_nll
from .prior import PriorConfig, kl_gradient, kl_to_prior

log = logging.getLogger("clpm.inference")

MODEL_FORMAT = 1
INIT_SCALE = 0.1


@dataclass(eq=False)
class VariationalState:
    mu: np.ndarray
    log_sigma: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_sigma = np.asarray(self.log_sigma, dtype=float)
        self.beta = float(self.beta)
        if self.mu.ndim != 3 or self.log_sigma.shape != self.mu.shape[:2]:
            raise ModelError(f"mu must be (n, K+1, d) and log_sigma (n, K+1), got {self.mu.shape} and "
                             f"{self.log_sigma.shape}")

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def n(self):
        return self.mu.shape[0]

    @property
    def K(self):
        return self.mu.shape[1] - 1

    @property
    def d(self):
        return self.mu.shape[2]

    def copy(self):
        return VariationalState(self.mu.copy(), self.log_sigma.copy(), self.beta)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_sigma)) and np.isfinite(self.beta))


@dataclass
class Hyperparams:
    d: int = 2
    K: int = 15
    tau: float = 1.0
    tau0: float = None
    epochs: int = 500
    lr_phi: float = 0.01
    lr_beta: float = 1e-5
    riemann_R: int = DEFAULT_RIEMANN_R
    kind: RateKind = RateKind.EUCLIDEAN
    negatives: int = None
    batch: int = None
    negatives_per_interval: bool = False
    elbo_samples: int = 1
    seed: int = 0
    threads: int = 1
    log_every: int = 50

    def __post_init__(self):
        if self.tau0 is None:
            self.tau0 = self.tau
        try:
            self.kind = RateKind(self.kind)
        except ValueError:
            raise ConfigError(f"unknown rate model {self.kind!r}, expected one of {[k.value for k in RateKind]}")
        for name in ("d", "K", "riemann_R", "elbo_samples", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not (self.tau > 0 and self.tau0 > 0):
            raise ConfigError(f"tau and tau0 must be positive, got {self.tau} and {self.tau0}")
        for name in ("negatives", "batch"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be at least 1 when given, got {value}")

    @property
    def stochastic_plan(self):
        return self.negatives is not None or self.batch is not None or self.negatives_per_interval

    def as_dict(self):
        result = asdict(self)
        result["kind"] = self.kind.value
        return result

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class Gradient:
    d_mu: np.ndarray
    d_log_sigma: np.ndarray
    d_beta: float

    def as_dict(self):
        return {"mu": self.d_mu, "log_sigma": self.d_log_sigma, "beta": np.asarray(self.d_beta, dtype=float)}


@dataclass(eq=False)
class FittedModel:
    state: VariationalState
    hyper: Hyperparams
    part: IntervalPartition
    loss_trace: np.ndarray
    labels: tuple
    t_min: float = 0.0
    t_max: float = 1.0
    directed: bool = False
    dataset: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0

    @property
    def n(self):
        return self.state.n

    def rate_model(self):
        return RateModel(self.hyper.kind, self.state.beta)

    def mean_configuration(self):
        return LatentConfiguration(self.state.mu, self.part)

    def prior(self):
        return prior_config(self.hyper, self.part)

    def label_map(self):
        return {label: i for i, label in enumerate(self.labels)}


def prior_config(hp, part):
    return PriorConfig(tau=hp.tau, d=hp.d, part=part, tau0=hp.tau0)


def init_state(n, hp, seed=None):
    rng = np.random.default_rng(seed)
    mu = INIT_SCALE * rng.standard_normal((n, hp.K + 1, hp.d))
    return VariationalState(mu, np.full((n, hp.K + 1), np.log(INIT_SCALE)), 0.0)


def reparam_sample(vs, eps, part):
    eps = np.asarray(eps, dtype=float)
    if eps.shape != vs.mu.shape:
        raise ModelError(f"noise shape {eps.shape} does not match mu {vs.mu.shape}")
    return LatentConfiguration(vs.mu + vs.sigma[..., None] * eps, part)


def _objective(vs, ev, part, pc, kind, plan, eps, R, with_grad, threads):
    """
    Negative ELBO, its terms and (optionally) its gradient.  eps is one noise array shaped like mu, or a stack of S
    of them whose reconstruction terms are averaged.
    """
    if plan is None:
        plan = SamplingPlan.full(ev, part)
    eps = np.asarray(eps, dtype=float)
    draws = eps[None] if eps.ndim == 3 else eps
    sigma = vs.sigma
    S = draws.shape[0]
    terms = {"survival": 0.0, "events": 0.0}
    d_mu = np.zeros_like(vs.mu)
    d_log_sigma = np.zeros_like(vs.log_sigma)
    d_beta = 0.0
    for noise in draws:
        z = reparam_sample(vs, noise, part).z
        nll = evaluate_nll(z, vs.beta, kind, part, plan, R=R, with_grad=with_grad, threads=threads)
        terms["survival"] += nll.survival / S
        terms["events"] += nll.events / S
        if with_grad:
            d_mu += nll.dz / S
            d_log_sigma += (nll.dz * noise).sum(axis=2) * sigma / S
            d_beta += nll.dbeta / S
    terms["kl"] = kl_to_prior(vs, pc)
    loss = terms["survival"] - terms["events"] + terms["kl"]
    if not with_grad:
        return loss, terms, None
    kl_mu, kl_log_sigma = kl_gradient(vs, pc)
    return loss, terms, Gradient(d_mu + kl_mu, d_log_sigma + kl_log_sigma, d_beta)


def elbo_loss(vs, ev, part, pc, kind, plan, eps, R=DEFAULT_RIEMANN_R, threads=1):
    loss, _, _ = _objective(vs, ev, part, pc, kind, plan, eps, R, False, threads)
    return loss


def loss_gradient(vs, ev, part, pc, kind, plan, eps, R=DEFAULT_RIEMANN_R, threads=1):
    """exact gradient of elbo_loss at the given noise with respect to mu, log_sigma and beta"""
    _, _, grads = _objective(vs, ev, part, pc, kind, plan, eps, R, True, threads)
    return grads


class Adam:
    """
    Adaptive moment estimation over a dict of named arrays.  lr is a float or a dict keyed like the parameters, so
    different parameter groups can move at different rates.
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def rate(self, key):
        return self.lr[key] if isinstance(self.lr, dict) else self.lr

    def step(self, params, grads):
        """updates params in place"""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key in params:
            g = np.asarray(grads[key], dtype=float)
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] *= self.beta1
            self.m[key] += (1.0 - self.beta1) * g
            self.v[key] *= self.beta2
            self.v[key] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[key] / bc2) + self.epsilon
            params[key] -= (self.rate(key) / bc1) * self.m[key] / denom
        return params


def adam_step(vs, opt_state, grads, lr_phi, lr_beta):
    """one Adam update of a VariationalState: mu and log_sigma move at lr_phi, beta at lr_beta"""
    opt_state.lr = {"mu": lr_phi, "log_sigma": lr_phi, "beta": lr_beta}
    params = {"mu": vs.mu.copy(), "log_sigma": vs.log_sigma.copy(), "beta": np.array(vs.beta, dtype=float)}
    opt_state.step(params, grads.as_dict())
    return VariationalState(params["mu"], params["log_sigma"], float(params["beta"])), opt_state


def _check_finite(epoch, terms, grads):
    for term, value in terms.items():
        if not np.isfinite(value):
            raise NonFiniteLossError(epoch, term, value)
    if grads is not None and not (np.all(np.isfinite(grads.d_mu)) and np.all(np.isfinite(grads.d_log_sigma))
                                  and np.isfinite(grads.d_beta)):
        raise NonFiniteLossError(epoch, "gradient")


def fit(ev, hp, split=None):
    """
    Run hp.epochs Adam steps on the negative ELBO.  With a split only train pairs enter the likelihood and the
    validation/test pairs are kept out of every negative pool.  Deterministic for a given hp.seed when threads=1.
    """
    if ev.n < 2:
        raise DataError(f"need at least two nodes to fit, got {ev.n}")
    part = IntervalPartition.uniform(hp.K)
    pc = prior_config(hp, part)
    excluded = split.excluded if split is not None else frozenset()
    init_seed, noise_seed, plan_seed = np.random.SeedSequence(hp.seed).spawn(3)
    noise_rng = np.random.default_rng(noise_seed)
    plan_rng = np.random.default_rng(plan_seed)
    vs = init_state(ev.n, hp, init_seed)

    stats = dataset_stats(ev)
    counts = None
    if hp.negatives_per_interval:
        counts = interval_counts(ev.restrict(excluded, keep=False) if excluded else ev, part)
    static_plan = None if hp.stochastic_plan else SamplingPlan.full(ev, part, excluded)
    log.info(f"fitting {stats['nodes']} nodes, {stats['unique_edges']} pairs, {stats['events']} events: "
             f"K={hp.K} d={hp.d} tau={hp.tau} tau0={hp.tau0} kind={hp.kind.value} epochs={hp.epochs}")

    optimizer = Adam()
    shape = vs.mu.shape if hp.elbo_samples == 1 else (hp.elbo_samples,) + vs.mu.shape
    trace = []
    started = time.perf_counter()
    for epoch in range(1, hp.epochs + 1):
        plan = static_plan
        if plan is None:
            plan = SamplingPlan.sampled(ev, part, negatives=hp.negatives, batch=hp.batch, excluded=excluded,
                                        seed=plan_rng, per_interval=hp.negatives_per_interval, counts=counts)
        eps = noise_rng.standard_normal(shape)
        loss, terms, grads = _objective(vs, ev, part, pc, hp.kind, plan, eps, hp.riemann_R, True, hp.threads)
        _check_finite(epoch, terms, grads)
        trace.append(loss)
        vs, optimizer = adam_step(vs, optimizer, grads, hp.lr_phi, hp.lr_beta)
        if not vs.is_finite():
            raise NonFiniteLossError(epoch, "update")
        if hp.log_every and (epoch % hp.log_every == 0 or epoch == 1):
            log.info(f"epoch {epoch}/{hp.epochs} loss={loss:.4f} kl={terms['kl']:.4f} beta={vs.beta:.5f}")
        log.debug(f"epoch {epoch} survival={terms['survival']:.6g} events={terms['events']:.6g} "
                  f"kl={terms['kl']:.6g} plan={plan.mode} rows={plan.pair_i.size}")
    runtime = time.perf_counter() - started
    log.info(f"fit finished in {runtime:.2f}s")
    return FittedModel(state=vs, hyper=hp, part=part, loss_trace=np.asarray(trace, dtype=float), labels=ev.labels,
                       t_min=ev.t_min, t_max=ev.t_max, directed=ev.directed, dataset=stats,
                       runtime_seconds=runtime)


def _model_document(fm):
    return {
        "format": MODEL_FORMAT,
        "hyper": fm.hyper.as_dict(),
        "cut_points": list(fm.part.cut_points),
        "labels": list(fm.labels),
        "directed": fm.directed,
        "time_scale": {"t_min": fm.t_min, "t_max": fm.t_max},
        "dataset": fm.dataset,
        "runtime_seconds": fm.runtime_seconds,
        "state": {
            "mu": fm.state.mu.tolist(),
            "log_sigma": fm.state.log_sigma.tolist(),
            "beta": fm.state.beta,
        },
    }


def embeddings_frame(fm, ev=None):
    """one row per (node, cut point); window_degree counts events within half an interval of the cut point"""
    n, K1, d = fm.state.mu.shape
    frame = pd.DataFrame({
        "node": np.repeat(np.asarray(fm.labels, dtype=object), K1),
        "k": np.tile(np.arange(K1), n),
        "eta": np.tile(fm.part.eta, n),
    })
    flat = fm.state.mu.reshape(n * K1, d)
    for axis in range(d):
        frame[f"mu_{axis}"] = flat[:, axis]
    frame["sigma"] = fm.state.sigma.reshape(-1)
    if ev is not None:
        frame["window_degree"] = window_degrees(ev, fm.part.eta, 1 / (2 * fm.part.K)).reshape(-1)
    return frame


def save_model(fm, directory, ev=None):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(_model_document(fm), fh, cls=DjangoJSONEncoder, indent=1)
    pd.DataFrame({"epoch": np.arange(1, fm.loss_trace.size + 1), "loss": fm.loss_trace}).to_csv(
        os.path.join(directory, "loss.csv"), index=False, float_format="%.17g")
    embeddings_frame(fm, ev).to_csv(os.path.join(directory, "embeddings.csv"), index=False, float_format="%.17g")
    log.info(f"model written to {directory}")


def load_model(path):
    if os.path.isdir(path):
        path = os.path.join(path, "model.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as ose:
        raise DataError(f"cannot read model {path}: {ose.strerror}")
    except ValueError as ve:
        raise DataError(f"model {path} is not valid JSON: {ve}")
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"unsupported model format {doc.get('format')!r} in {path}")
    try:
        hyper = Hyperparams.from_dict(doc["hyper"])
        state = doc["state"]
        vs = VariationalState(np.array(state["mu"], dtype=float), np.array(state["log_sigma"], dtype=float),
                              state["beta"])
        part = IntervalPartition(tuple(doc["cut_points"]))
        scale = doc["time_scale"]
        loss_path = os.path.join(os.path.dirname(path), "loss.csv")
        trace = pd.read_csv(loss_path)["loss"].to_numpy(dtype=float) if os.path.exists(loss_path) else np.zeros(0)
        return FittedModel(state=vs, hyper=hyper, part=part, loss_trace=trace, labels=tuple(doc["labels"]),
                           t_min=scale["t_min"], t_max=scale["t_max"], directed=doc["directed"],
                           dataset=doc.get("dataset", {}), runtime_seconds=doc.get("runtime_seconds", 0.0))
    except KeyError as ke:
        raise DataError(f"model {path} is missing the {ke} field")
