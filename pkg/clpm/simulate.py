"""
Synthetic temporal networks from a piecewise-constant stochastic block model.

Every segment fixes a cluster for each node and every unordered pair draws a Poisson number of events from the rate of
its two clusters, with timestamps uniform over the segment.
"""
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from django.core.serializers.json import DjangoJSONEncoder

from .events import EventList, write_events
from .exceptions import DataError

log = logging.getLogger("clpm.simulate")

DEFAULT_NODES = 60
DEFAULT_INTRA_RATE = 8.0
DEFAULT_INTER_RATE = 0.3


@dataclass(frozen=True, eq=False)
class SbmSpec:
    """
    memberships[s, i] is the cluster of node i during segment s (0-based here, 1-based in labels.csv);
    rates[a, b] is the expected number of events per pair per segment between clusters a and b.
    """
    n: int
    segments: tuple
    memberships: np.ndarray
    rates: np.ndarray
    seed: int = 0

    def __post_init__(self):
        memberships = np.asarray(self.memberships, dtype=np.int64)
        rates = np.asarray(self.rates, dtype=float)
        segments = tuple((float(a), float(b)) for a, b in self.segments)
        object.__setattr__(self, "memberships", memberships)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "segments", segments)
        if self.n < 2:
            raise DataError(f"need at least two nodes, got {self.n}")
        bounds = np.array(segments)
        if (not len(bounds) or bounds[0, 0] != 0.0 or bounds[-1, 1] != 1.0
                or np.any(bounds[1:, 0] != bounds[:-1, 1]) or np.any(bounds[:, 1] <= bounds[:, 0])):
            raise DataError(f"segments must partition [0, 1], got {segments}")
        if memberships.shape != (len(segments), self.n):
            raise DataError(f"memberships must have shape (segments, n) = ({len(segments)}, {self.n})")
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1] or not np.allclose(rates, rates.T):
            raise DataError("rates must be a symmetric cluster x cluster matrix")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise DataError("rates must be finite and non-negative")
        if memberships.min() < 0 or memberships.max() >= rates.shape[0]:
            raise DataError("membership refers to a cluster without a rate")

    @classmethod
    def default(cls, n=DEFAULT_NODES, intra_rate=DEFAULT_INTRA_RATE, inter_rate=DEFAULT_INTER_RATE, seed=0):
        """
        Three equal segments, the first half of the nodes in C0 and the rest in C1.  Node 0 leaves C0 for the
        singleton C2 in the second segment and joins C1 in the third.
        """
        if n < 4:
            raise DataError(f"the default scenario needs at least 4 nodes, got {n}")
        static = np.where(np.arange(n) < n // 2, 0, 1)
        memberships = np.tile(static, (3, 1))
        memberships[1, 0] = 2
        memberships[2, 0] = 1
        rates = np.full((3, 3), float(inter_rate))
        np.fill_diagonal(rates, float(intra_rate))
        return cls(n=n, segments=((0.0, 1 / 3), (1 / 3, 2 / 3), (2 / 3, 1.0)), memberships=memberships,
                   rates=rates, seed=seed)

    def membership(self, node, segment):
        return int(self.memberships[segment, node])

    def rate(self, a, b):
        return float(self.rates[a, b])

    def pair_rates(self, segment):
        """expected count of every pair i < j in one segment, in np.triu_indices order"""
        i, j = np.triu_indices(self.n, 1)
        c = self.memberships[segment]
        return self.rates[c[i], c[j]]

    def expected_events(self):
        return float(sum(self.pair_rates(s).sum() for s in range(len(self.segments))))

    def as_dict(self):
        return {"n": self.n, "segments": [list(s) for s in self.segments], "memberships": self.memberships.tolist(),
                "rates": self.rates.tolist(), "seed": self.seed}


@dataclass(frozen=True, eq=False)
class SimulatedNetwork:
    events: EventList
    labels: np.ndarray
    pairs: np.ndarray
    counts: np.ndarray
    spec: SbmSpec = None


def sbm_generate(spec):
    """
    Sample an undirected event history from the spec.  Returns the events (node labels "0".."n-1", times already on
    [0, 1]), the ground-truth clusters per segment and the exact per-pair per-segment counts.
    """
    rng = np.random.default_rng(spec.seed)
    i, j = np.triu_indices(spec.n, 1)
    counts = np.zeros((i.size, len(spec.segments)), dtype=np.int64)
    sources, dests, times = [], [], []
    for s, (start, end) in enumerate(spec.segments):
        counts[:, s] = rng.poisson(spec.pair_rates(s))
        total = int(counts[:, s].sum())
        sources.append(np.repeat(i, counts[:, s]))
        dests.append(np.repeat(j, counts[:, s]))
        times.append(rng.uniform(start, end, size=total))
    sources, dests, times = np.concatenate(sources), np.concatenate(dests), np.concatenate(times)
    order = np.argsort(times, kind="stable")
    events = EventList(sources[order], dests[order], times[order], n=spec.n, directed=False,
                       labels=tuple(str(node) for node in range(spec.n)), t_min=0.0, t_max=1.0)
    log.info(f"simulated {len(events)} events on {spec.n} nodes over {len(spec.segments)} segments "
             f"(expected {spec.expected_events():.1f})")
    return SimulatedNetwork(events=events, labels=spec.memberships.copy(), pairs=np.stack([i, j], axis=1),
                            counts=counts, spec=spec)


def labels_frame(sim):
    S, n = sim.labels.shape
    return pd.DataFrame({
        "node": np.tile(np.arange(n), S),
        "segment": np.repeat(np.arange(1, S + 1), n),
        "cluster": sim.labels.reshape(-1),
    })


def write_simulation(sim, directory):
    os.makedirs(directory, exist_ok=True)
    write_events(sim.events, os.path.join(directory, "events.csv"))
    labels_frame(sim).to_csv(os.path.join(directory, "labels.csv"), index=False)
    if sim.spec is not None:
        with open(os.path.join(directory, "spec.json"), "w", encoding="utf-8") as fh:
            json.dump(sim.spec.as_dict(), fh, cls=DjangoJSONEncoder, indent=1)
    log.info(f"simulation written to {directory}")
