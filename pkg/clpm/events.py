"""
Timestamped interaction data: parsing, time normalization, interval partitions, per-interval counts, edge splits and
negative sampling.

Node ids are contiguous integers 0..n-1 and times are normalized to [0, 1].  The label <-> id mapping and the
(t_min, t_max) wall clock scale travel with the EventList so results can always be exported in the original units.
"""
import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from .exceptions import DataError, ParseError

log = logging.getLogger("clpm.events")


def _label_order(labels):
    # integer-like labels keep their numeric order so simulated node "0" stays id 0
    labels = sorted(set(labels))
    try:
        return sorted(labels, key=lambda label: int(label))
    except ValueError:
        return labels


@dataclass(frozen=True, eq=False)
class IntervalPartition:
    """cut points 0 = eta_0 < eta_1 < ... < eta_K = 1; interval k (1-based) is [eta_{k-1}, eta_k)"""
    cut_points: tuple

    def __post_init__(self):
        eta = np.asarray(self.cut_points, dtype=float)
        if eta.ndim != 1 or eta.size < 2:
            raise DataError("a partition needs at least two cut points")
        if eta[0] != 0.0 or eta[-1] != 1.0:
            raise DataError(f"cut points must start at 0 and end at 1, got {eta[0]} and {eta[-1]}")
        if np.any(np.diff(eta) <= 0):
            raise DataError("cut points must be strictly increasing")
        object.__setattr__(self, "cut_points", tuple(float(x) for x in eta))

    @classmethod
    def uniform(cls, K):
        if K < 1:
            raise DataError(f"K must be at least 1, got {K}")
        return cls(tuple(np.arange(K + 1) / K))

    @property
    def K(self):
        return len(self.cut_points) - 1

    @cached_property
    def eta(self):
        return np.asarray(self.cut_points)

    @cached_property
    def lengths(self):
        return np.diff(self.eta)

    def bounds(self, k):
        if not 1 <= k <= self.K:
            raise DataError(f"interval index {k} outside 1..{self.K}")
        return self.cut_points[k - 1], self.cut_points[k]

    def interval_of(self, t):
        """1-based interval index; left closed, right open, except t = 1 which belongs to interval K"""
        k = np.searchsorted(self.eta, t, side="right")
        return np.clip(k, 1, self.K)

    def midpoints(self):
        return (self.eta[:-1] + self.eta[1:]) / 2


@dataclass(frozen=True, eq=False)
class EventList:
    sources: np.ndarray
    dests: np.ndarray
    times: np.ndarray
    n: int
    directed: bool = False
    labels: tuple = ()
    t_min: float = 0.0
    t_max: float = 1.0
    dropped_self_loops: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", np.asarray(self.sources, dtype=np.int64))
        object.__setattr__(self, "dests", np.asarray(self.dests, dtype=np.int64))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(self.n)))
        if len(self.labels) != self.n:
            raise DataError(f"{len(self.labels)} labels for {self.n} nodes")
        if not (self.sources.shape == self.dests.shape == self.times.shape):
            raise DataError("sources, dests and times must have the same length")
        if len(self.times):
            if np.any(np.diff(self.times) < 0):
                raise DataError("event times must be sorted")
            if self.times[0] < 0 or self.times[-1] > 1:
                raise DataError("event times must lie in [0, 1]")
            if np.any(self.sources == self.dests):
                raise DataError("self-loops are not allowed")
            if min(self.sources.min(), self.dests.min()) < 0 or max(self.sources.max(), self.dests.max()) >= self.n:
                raise DataError("node ids must lie in 0..n-1")
            if not self.directed and np.any(self.sources > self.dests):
                raise DataError("undirected events must be stored with source < dest")

    @classmethod
    def from_records(cls, records, directed=False, time_range=None, labels=None):
        """
        Build a normalized EventList from (source_label, dest_label, time) records.
        Self-loops are dropped, labels are mapped to 0..n-1, times are min-max normalized (or against the given
        time_range), undirected pairs are canonicalized and events are sorted by time.
        """
        records = list(records)
        kept = [(str(s), str(d), float(t)) for s, d, t in records if str(s) != str(d)]
        dropped = len(records) - len(kept)
        if dropped:
            log.warning(f"dropped {dropped} self-loop event(s)")
        if labels is None:
            labels = _label_order([s for s, _, _ in kept] + [d for _, d, _ in kept])
        labels = tuple(str(label) for label in labels)
        ids = {label: i for i, label in enumerate(labels)}
        try:
            sources = np.array([ids[s] for s, _, _ in kept], dtype=np.int64)
            dests = np.array([ids[d] for _, d, _ in kept], dtype=np.int64)
        except KeyError as ke:
            raise DataError(f"node label {ke} is not in the label vocabulary")
        raw = np.array([t for _, _, t in kept], dtype=float)
        if time_range is None:
            t_min, t_max = (float(raw.min()), float(raw.max())) if raw.size else (0.0, 1.0)
        else:
            t_min, t_max = (float(x) for x in time_range)
        times = _min_max(raw, t_min, t_max)
        if not directed:
            sources, dests = np.minimum(sources, dests), np.maximum(sources, dests)
        order = np.argsort(times, kind="stable")
        return cls(sources[order], dests[order], times[order], n=len(labels), directed=directed, labels=labels,
                   t_min=t_min, t_max=t_max, dropped_self_loops=dropped)

    def __len__(self):
        return int(self.times.size)

    def normalized(self):
        """min-max normalize again; a normalized list comes back unchanged"""
        if not len(self):
            return self
        lo, hi = float(self.times[0]), float(self.times[-1])
        times = _min_max(self.times, lo, hi)
        scale = self.t_max - self.t_min
        return EventList(self.sources, self.dests, times, self.n, self.directed, self.labels,
                         t_min=self.t_min + lo * scale, t_max=self.t_min + hi * scale,
                         dropped_self_loops=self.dropped_self_loops)

    def to_wall_clock(self, t):
        return self.t_min + np.asarray(t) * (self.t_max - self.t_min)

    def key(self, i, j):
        if self.directed:
            return int(i), int(j)
        return (int(i), int(j)) if i < j else (int(j), int(i))

    @cached_property
    def codes(self):
        return self.sources * self.n + self.dests

    @cached_property
    def unique_pairs(self):
        if not len(self):
            return np.zeros((0, 2), dtype=np.int64)
        codes = np.unique(self.codes)
        return np.stack([codes // self.n, codes % self.n], axis=1)

    def pair_set(self):
        return frozenset((int(i), int(j)) for i, j in self.unique_pairs)

    @cached_property
    def partners(self):
        """node -> sorted array of the nodes it interacted with (out-partners when directed)"""
        pairs = self.unique_pairs
        if not self.directed:
            pairs = np.concatenate([pairs, pairs[:, ::-1]])
        result = {i: np.zeros(0, dtype=np.int64) for i in range(self.n)}
        if len(pairs):
            order = np.lexsort((pairs[:, 1], pairs[:, 0]))
            pairs = pairs[order]
            nodes, starts = np.unique(pairs[:, 0], return_index=True)
            for node, chunk in zip(nodes, np.split(pairs[:, 1], starts[1:])):
                result[int(node)] = chunk
        return result

    def restrict(self, pairs, keep=True):
        """events whose pair is (keep=True) or is not (keep=False) in the given pair set; times are not rescaled"""
        codes = np.array([i * self.n + j for i, j in (self.key(*p) for p in pairs)], dtype=np.int64)
        mask = np.isin(self.codes, codes)
        if not keep:
            mask = ~mask
        return EventList(self.sources[mask], self.dests[mask], self.times[mask], self.n, self.directed,
                         self.labels, self.t_min, self.t_max, self.dropped_self_loops)

    def label_map(self):
        return {label: i for i, label in enumerate(self.labels)}

    def to_frame(self):
        return pd.DataFrame({
            "source": [self.labels[i] for i in self.sources],
            "dest": [self.labels[j] for j in self.dests],
            "timestamp": self.to_wall_clock(self.times),
        })


def _min_max(raw, t_min, t_max):
    if t_max > t_min:
        return (raw - t_min) / (t_max - t_min)
    # a single distinct timestamp; everything lands on 0
    return np.zeros_like(raw)


def parse_events(source, directed=False, time_range=None, labels=None):
    """
    Read `source,dest,timestamp` rows (one header row) from a text stream.
    Raises ParseError with the offending line number for malformed rows and for input without events.
    A fixed label vocabulary (and time_range) maps a second file onto the ids and time scale of a fitted model.
    """
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None:
        raise ParseError("empty input")
    if len(header) != 3:
        raise ParseError(f"expected header source,dest,timestamp but got {len(header)} column(s)", reader.line_num)
    records = []
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", reader.line_num)
        src, dst, raw_time = (cell.strip() for cell in row)
        try:
            t = float(raw_time)
        except ValueError:
            raise ParseError(f"timestamp {raw_time!r} is not a number", reader.line_num)
        if not np.isfinite(t) or t < 0:
            raise ParseError(f"timestamp {raw_time!r} must be a finite non-negative number", reader.line_num)
        records.append((src, dst, t))
    if not records:
        raise ParseError("empty input: no events after the header")
    ev = EventList.from_records(records, directed=directed, time_range=time_range, labels=labels)
    log.info(f"parsed {len(ev)} events on {ev.n} nodes ({ev.dropped_self_loops} self-loops dropped)")
    return ev


def read_events(path, directed=False, time_range=None, labels=None):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return parse_events(fh, directed=directed, time_range=time_range, labels=labels)
    except OSError as ose:
        raise DataError(f"cannot read events {path}: {ose.strerror}")


def write_events(ev, path):
    ev.to_frame().to_csv(path, index=False, float_format="%.17g")


def write_nodes(ev, path):
    pd.DataFrame({"label": list(ev.labels), "id": np.arange(ev.n)}).to_csv(path, index=False)


@dataclass(frozen=True, eq=False)
class CountTensor:
    """sparse N_ij^(k): one row per pair with at least one event, one column per interval"""
    pairs: np.ndarray
    counts: np.ndarray
    n: int
    directed: bool = False

    @property
    def K(self):
        return self.counts.shape[1]

    def total(self):
        return int(self.counts.sum())

    @cached_property
    def index(self):
        return {(int(i), int(j)): row for row, (i, j) in enumerate(self.pairs)}

    def key(self, i, j):
        if self.directed:
            return int(i), int(j)
        return (int(i), int(j)) if i < j else (int(j), int(i))

    def get(self, i, j, k):
        row = self.index.get(self.key(i, j))
        return 0 if row is None else int(self.counts[row, k - 1])

    def lookup(self, i, j, k):
        """vectorized get for arrays of (i, j, k)"""
        rows = np.array([self.index.get(self.key(a, b), -1) for a, b in zip(i, j)], dtype=np.int64)
        k = np.asarray(k)
        found = rows >= 0
        result = np.zeros(rows.shape, dtype=np.int64)
        result[found] = self.counts[rows[found], k[found] - 1]
        return result

    def restrict(self, pairs):
        keys = {self.key(*p) for p in pairs}
        mask = np.array([(int(i), int(j)) in keys for i, j in self.pairs], dtype=bool)
        return CountTensor(self.pairs[mask], self.counts[mask], self.n, self.directed)

    def degrees(self, k):
        """deg(i, k) for every node; both endpoints of a pair are credited"""
        deg = np.zeros(self.n, dtype=np.int64)
        if len(self.pairs):
            column = self.counts[:, k - 1]
            np.add.at(deg, self.pairs[:, 0], column)
            np.add.at(deg, self.pairs[:, 1], column)
        return deg


def interval_counts(ev, part):
    K = part.K
    if not len(ev):
        return CountTensor(np.zeros((0, 2), dtype=np.int64), np.zeros((0, K), dtype=np.int64), ev.n, ev.directed)
    codes, inverse = np.unique(ev.codes, return_inverse=True)
    counts = np.zeros((codes.size, K), dtype=np.int64)
    np.add.at(counts, (inverse.ravel(), part.interval_of(ev.times) - 1), 1)
    pairs = np.stack([codes // ev.n, codes % ev.n], axis=1)
    return CountTensor(pairs, counts, ev.n, ev.directed)


def node_degree(counts, i, k):
    if not len(counts.pairs):
        return 0
    column = counts.counts[:, k - 1]
    return int(column[counts.pairs[:, 0] == i].sum() + column[counts.pairs[:, 1] == i].sum())


@dataclass(frozen=True)
class EdgeSplit:
    train: frozenset
    validation: frozenset
    test: frozenset
    seed: int
    test_frac: float = 0.0
    val_frac: float = 0.0

    @property
    def excluded(self):
        return self.validation | self.test

    def as_dict(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


def split_edges(ev, test_frac, val_frac, seed):
    """
    Shuffle the unique interacting pairs with a seeded generator and cut off floor(test_frac * m) test pairs and
    floor(val_frac * m) validation pairs; the rest is train.
    """
    if test_frac < 0 or val_frac < 0 or test_frac + val_frac >= 1:
        raise DataError(f"invalid split fractions test={test_frac} validation={val_frac}")
    pairs = ev.unique_pairs
    m = len(pairs)
    if m < 3:
        raise DataError(f"need at least 3 unique pairs to split, got {m}")
    order = np.random.default_rng(seed).permutation(m)
    n_test = int(np.floor(test_frac * m))
    n_val = int(np.floor(val_frac * m))
    as_set = lambda rows: frozenset((int(i), int(j)) for i, j in pairs[rows])  # noqa: E731
    split = EdgeSplit(train=as_set(order[n_test + n_val:]), validation=as_set(order[n_test:n_test + n_val]),
                      test=as_set(order[:n_test]), seed=seed, test_frac=test_frac, val_frac=val_frac)
    log.debug(f"split {m} pairs into {len(split.train)} train / {len(split.validation)} validation / "
              f"{len(split.test)} test")
    return split


@dataclass(frozen=True)
class NegativeSample:
    pairs: frozenset
    pool_size: int
    nodes: np.ndarray = field(default=None, compare=False)


def sample_negative_pairs(ev, i, count, excluded=frozenset(), seed=None, interval=None, counts=None):
    """
    Draw up to `count` pairs (i, j) without replacement among the pairs that never interact (or, when `interval`
    is given, that have no event in that interval according to `counts`) and are not in `excluded`.
    The returned pool_size is the size of the whole candidate pool, used to reweight the sampled terms.
    """
    if count < 1:
        raise DataError(f"count must be at least 1, got {count}")
    blocked = np.zeros(ev.n, dtype=bool)
    blocked[i] = True
    if interval is None:
        blocked[ev.partners[i]] = True
    else:
        blocked[interval_partners(counts, i, interval)] = True
    for a, b in excluded:
        if a == i:
            blocked[b] = True
        elif b == i and not ev.directed:
            blocked[a] = True
    pool = np.flatnonzero(~blocked)
    if not pool.size:
        return NegativeSample(frozenset(), 0, np.zeros(0, dtype=np.int64))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=min(count, pool.size), replace=False)
    return NegativeSample(frozenset(ev.key(i, j) for j in chosen), int(pool.size), np.sort(chosen))


def interval_partners(counts, i, k):
    """nodes with at least one event with i in interval k"""
    if not len(counts.pairs):
        return np.zeros(0, dtype=np.int64)
    active = counts.counts[:, k - 1] > 0
    pairs = counts.pairs[active]
    out = pairs[pairs[:, 0] == i, 1]
    if counts.directed:
        return out
    return np.concatenate([out, pairs[pairs[:, 1] == i, 0]])


def dataset_stats(ev):
    return {"nodes": int(ev.n), "unique_edges": int(len(ev.unique_pairs)), "events": len(ev)}


def window_degree(ev, i, t, half_width):
    """number of events involving node i within [t - half_width, t + half_width]"""
    involved = (ev.sources == i) | (ev.dests == i)
    return int(np.count_nonzero(involved & (np.abs(ev.times - t) <= half_width)))


def window_degrees(ev, times, half_width):
    """window_degree for every node at every given time, shape (n, len(times))"""
    times = np.asarray(times, dtype=float)
    result = np.zeros((ev.n, times.size), dtype=np.int64)
    for col, t in enumerate(times):
        inside = np.abs(ev.times - t) <= half_width
        np.add.at(result[:, col], ev.sources[inside], 1)
        np.add.at(result[:, col], ev.dests[inside], 1)
    return result
