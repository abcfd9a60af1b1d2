"""Directed road networks, stream distance and tail-up spatial correlation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

DEFAULT_BIN_HOURS = 2.0
ADDITIVITY_RTOL = 1e-6
MAX_REPAIR_GAP = 0.05


class NetworkError(ValueError):
    pass


class WeightsError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkLocation:
    segment: str
    offset: float  # meters from the upstream end


@dataclass(frozen=True)
class Segment:
    id: str
    length: float
    to: tuple[str, ...] = ()


@dataclass(frozen=True)
class Sensor:
    id: int
    location: NetworkLocation


@dataclass(frozen=True)
class TailupParams:
    beta: float
    sigma: float

    def __post_init__(self):
        if not (self.beta > 0 and self.sigma > 0):
            raise ValueError("tail-up beta and sigma must be positive")

    @classmethod
    def from_raw(cls, beta_raw, sigma_raw):
        return cls(float(np.logaddexp(0.0, beta_raw)), float(np.logaddexp(0.0, sigma_raw)))

    def covariance(self, d):
        return self.beta * np.exp(-np.asarray(d, dtype=float) / self.sigma)


@dataclass(frozen=True, eq=False)
class TrafficNetwork:
    segments: dict
    sensors: tuple

    @property
    def segment_ids(self):
        return list(self.segments)

    @property
    def n_sensors(self):
        return len(self.sensors)

    @cached_property
    def _index(self):
        return {sid: i for i, sid in enumerate(self.segments)}

    @cached_property
    def _lengths(self):
        return np.array([s.length for s in self.segments.values()])

    @cached_property
    def _start_dist(self):
        """Shortest along-network distance between segment starts."""
        n = len(self.segments)
        rows, cols, data = [], [], []
        for seg in self.segments.values():
            for nxt in seg.to:
                rows.append(self._index[seg.id])
                cols.append(self._index[nxt])
                data.append(seg.length)
        graph = csr_matrix((data, (rows, cols)), shape=(n, n))
        return shortest_path(graph, method="D", directed=True)

    @cached_property
    def _end_dist(self):
        """Distance from the downstream end of segment a to the start of b."""
        n = len(self.segments)
        out = np.full((n, n), np.inf)
        for seg in self.segments.values():
            a = self._index[seg.id]
            for nxt in seg.to:
                out[a] = np.minimum(out[a], self._start_dist[self._index[nxt]])
        return out

    def check_location(self, loc):
        seg = self.segments.get(loc.segment)
        if seg is None:
            raise NetworkError(f"location on unknown segment {loc.segment!r}")
        if not (0.0 <= loc.offset <= seg.length):
            raise NetworkError(
                f"offset {loc.offset} outside segment {loc.segment!r} of length {seg.length}")

    def directed_distance(self, u, v):
        """Distance travelling downstream from u to v (inf if v is not downstream)."""
        a, b = self._index[u.segment], self._index[v.segment]
        best = math.inf
        if a == b and u.offset <= v.offset:
            best = v.offset - u.offset
        via = self._lengths[a] - u.offset + self._end_dist[a, b] + v.offset
        return min(best, float(via))

    @cached_property
    def junctions(self):
        """Confluences as (inbound segment ids, outbound segment ids).

        A segment's downstream end and the upstream start of every segment in
        its ``to`` list are the same point; points joined that way form one
        junction.
        """
        parent = {}

        def find(x):
            while parent.setdefault(x, x) != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for seg in self.segments.values():
            for nxt in seg.to:
                parent[find(("end", seg.id))] = find(("start", nxt))
        groups = {}
        for seg in self.segments.values():
            if seg.to:
                groups.setdefault(find(("end", seg.id)), ([], []))[0].append(seg.id)
        for seg in self.segments.values():
            root = find(("start", seg.id))
            if root in groups:
                groups[root][1].append(seg.id)
        return [(tuple(i), tuple(o)) for i, o in groups.values()]


def build_network(spec):
    """Validate a parsed network description and build a TrafficNetwork."""
    if not isinstance(spec, dict):
        raise NetworkError("network description must be an object")
    _reject_unknown(spec, {"segments", "sensors"}, "network")
    segments = {}
    for entry in spec.get("segments", []):
        _reject_unknown(entry, {"id", "length_m", "to"}, "segment")
        sid = str(entry["id"])
        if sid in segments:
            raise NetworkError(f"duplicate segment id {sid!r}")
        length = float(entry["length_m"])
        if not length > 0:
            raise NetworkError(f"non-positive length for segment {sid!r}")
        segments[sid] = Segment(sid, length, tuple(str(x) for x in entry.get("to", [])))
    if not segments:
        raise NetworkError("network has no segments")
    for seg in segments.values():
        for nxt in seg.to:
            if nxt not in segments:
                raise NetworkError(f"dangling reference {nxt!r} in segment {seg.id!r}")

    sensors = []
    for entry in spec.get("sensors", []):
        _reject_unknown(entry, {"id", "segment", "offset_m"}, "sensor")
        sensors.append(Sensor(int(entry["id"]), NetworkLocation(str(entry["segment"]), float(entry["offset_m"]))))
    ids = [s.id for s in sensors]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate sensor id")
    if sorted(ids) != list(range(len(ids))):
        raise NetworkError("sensor ids must be dense 0..K-1")
    sensors.sort(key=lambda s: s.id)
    net = TrafficNetwork(segments, tuple(sensors))
    for s in sensors:
        if s.location.segment not in segments:
            raise NetworkError(f"dangling reference {s.location.segment!r} in sensor {s.id}")
        try:
            net.check_location(s.location)
        except NetworkError as exc:
            raise NetworkError(f"sensor off-segment: {exc}") from None
    return net


def load_network(path):
    return build_network(json.loads(Path(path).read_text()))


def network_to_dict(net):
    return {
        "segments": [{"id": s.id, "length_m": s.length, "to": list(s.to)} for s in net.segments.values()],
        "sensors": [{"id": s.id, "segment": s.location.segment, "offset_m": s.location.offset}
                    for s in net.sensors],
    }


def _reject_unknown(entry, allowed, what):
    if not isinstance(entry, dict):
        raise NetworkError(f"{what} entry must be an object")
    extra = set(entry) - allowed
    if extra:
        raise NetworkError(f"unknown {what} field(s): {', '.join(sorted(extra))}")


def stream_distance(net, u, v):
    """Shortest along-network distance between flow-connected locations, else None."""
    net.check_location(u)
    net.check_location(v)
    d = min(net.directed_distance(u, v), net.directed_distance(v, u))
    return None if math.isinf(d) else d


def flow_connected(net, u, v):
    return stream_distance(net, u, v) is not None


def flow_order(net, u, v):
    """Return (upstream, downstream, distance) for a flow-connected pair, else None."""
    down = net.directed_distance(u, v)
    up = net.directed_distance(v, u)
    if math.isinf(down) and math.isinf(up):
        return None
    if down <= up:
        return u, v, down
    return v, u, up


# segment weights --------------------------------------------------------------

@dataclass(frozen=True)
class SegmentWeights:
    bin_hours: float
    weights: dict = field(default_factory=dict)  # (bin, segment id) -> weight

    def __post_init__(self):
        if not self.bin_hours > 0:
            raise WeightsError("bin duration must be positive")
        for key, w in self.weights.items():
            if not w > 0:
                raise WeightsError(f"weight for {key} must be positive")

    @property
    def bins(self):
        return sorted({b for b, _ in self.weights})

    @cached_property
    def _bin_range(self):
        bins = self.bins
        return (bins[0], bins[-1]) if bins else (0, 0)

    def bins_of(self, ts):
        """Weight bin per time. A single-bin table is time-invariant, and the
        closing edge of the last bin (the horizon end) belongs to that bin.
        Other out-of-table times map to their own (missing) bin."""
        lo, hi = self._bin_range
        ts = np.asarray(ts, dtype=float)
        if lo == hi:
            return np.full(ts.shape, lo, dtype=int)
        b = np.floor(ts / self.bin_hours).astype(int)
        return np.where(ts == (hi + 1) * self.bin_hours, hi, b)

    def bin_of(self, t):
        return int(self.bins_of(t))

    def weight(self, bin_index, segment):
        try:
            return self.weights[(bin_index, segment)]
        except KeyError:
            raise WeightsError(f"missing weight for segment {segment!r} in bin {bin_index}") from None

    def at(self, t, segment):
        return self.weight(self.bin_of(t), segment)

    @classmethod
    def constant(cls, values, bins=(0,), bin_hours=DEFAULT_BIN_HOURS):
        return cls(bin_hours, {(b, s): float(w) for b in bins for s, w in values.items()})


def load_weights(path, bin_hours=None):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["bin_start_h", "segment", "weight"]:
            raise WeightsError("weights file header must be bin_start_h,segment,weight")
        for row in reader:
            rows.append((float(row["bin_start_h"]), row["segment"], float(row["weight"])))
    starts = sorted({r[0] for r in rows})
    if bin_hours is None:
        gaps = np.diff(starts)
        bin_hours = float(gaps.min()) if len(gaps) else DEFAULT_BIN_HOURS
    weights = {}
    for start, seg, w in rows:
        b = int(round(start / bin_hours))
        if not math.isclose(b * bin_hours, start, abs_tol=1e-9):
            raise WeightsError(f"bin start {start} is not a multiple of {bin_hours} h")
        weights[(b, seg)] = w
    return SegmentWeights(bin_hours, weights)


def save_weights(w, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["bin_start_h", "segment", "weight"])
        for (b, seg), value in sorted(w.weights.items()):
            out.writerow([repr(b * w.bin_hours), seg, repr(value)])


@dataclass(frozen=True)
class Violation:
    bin: int
    inbound: tuple
    outbound: tuple
    inbound_sum: float
    outbound_sum: float

    @property
    def gap(self):
        return _rel_gap(self.inbound_sum, self.outbound_sum)


def _rel_gap(a, b):
    return abs(a - b) / max(abs(a), abs(b))


def validate_weights(net, w, rtol=ADDITIVITY_RTOL):
    """List every (bin, junction) whose inbound and outbound weight sums differ."""
    out = []
    for b in w.bins:
        for seg in net.segments:
            w.weight(b, seg)
        for inbound, outbound in net.junctions:
            s_in = sum(w.weight(b, s) for s in inbound)
            s_out = sum(w.weight(b, s) for s in outbound)
            if _rel_gap(s_in, s_out) > rtol:
                out.append(Violation(b, inbound, outbound, s_in, s_out))
    return out


def renormalize_weights(net, w, max_gap=MAX_REPAIR_GAP, rtol=ADDITIVITY_RTOL):
    """Repair small additivity violations by scaling inbound weights.

    Junctions are processed from the outlets upstream so each repair only
    touches segments that have not been fixed yet. Violations larger than
    ``max_gap`` (relative) are rejected.
    """
    for v in validate_weights(net, w, rtol):
        if v.gap > max_gap:
            raise WeightsError(
                f"additivity violation {v.gap:.3g} at junction {v.inbound}->{v.outbound} "
                f"in bin {v.bin} exceeds repair limit {max_gap}")
    end_of = {}
    for j, (inbound, _) in enumerate(net.junctions):
        for s in inbound:
            end_of[s] = j
    deps = {j: {end_of[s] for s in outbound if s in end_of} for j, (_, outbound) in enumerate(net.junctions)}
    try:
        order = list(TopologicalSorter(deps).static_order())
        sweeps = 1
    except CycleError:
        order = list(range(len(net.junctions)))
        sweeps = 200
    new = dict(w.weights)
    for b in w.bins:
        for _ in range(sweeps):
            for j in order:
                inbound, outbound = net.junctions[j]
                s_in = sum(new[(b, s)] for s in inbound)
                s_out = sum(new[(b, s)] for s in outbound)
                for s in inbound:
                    new[(b, s)] *= s_out / s_in
            if sweeps == 1:
                break
    repaired = SegmentWeights(w.bin_hours, new)
    left = validate_weights(net, repaired, rtol)
    if left:
        raise WeightsError(f"could not restore additivity at {len(left)} junction(s)")
    return repaired


def tailup_correlation(net, w, t, u, v, p):
    """Tail-up exponential correlation between two network locations at time t."""
    order = flow_order(net, u, v)
    if order is None:
        return 0.0
    up, down, d = order
    b = w.bin_of(t)
    ratio = w.weight(b, up.segment) / w.weight(b, down.segment)
    return float(p.covariance(d) * math.sqrt(ratio))


# precomputed sensor geometry used by the model ---------------------------------

class SpatialIndex:
    """Sensor-to-sensor and incident-to-sensor terms of the tail-up correlation.

    The correlation factors as ``beta * exp(-d / sigma) * ratio``; this class
    caches the data-only parts (``connected``, ``d``, ``ratio``) so the model can
    keep beta and sigma as trainable quantities.
    """

    def __init__(self, net, weights):
        self.net = net
        self.weights = weights
        locs = [s.location for s in net.sensors]
        k = len(locs)
        self.n_sensors = k
        self.connected = np.zeros((k, k), dtype=bool)
        self.distance = np.zeros((k, k))
        self._upstream_first = np.zeros((k, k), dtype=bool)
        for i in range(k):
            for j in range(k):
                order = flow_order(net, locs[i], locs[j])
                if order is not None:
                    self.connected[i, j] = True
                    self.distance[i, j] = order[2]
                    self._upstream_first[i, j] = order[0] is locs[i]
        self._ratio_cache = {}
        self._loc_cache = {}

    def sensor_ratio(self, bin_index):
        """sqrt(w(upstream)/w(downstream)) for every sensor pair; 0 where unconnected."""
        if bin_index not in self._ratio_cache:
            w = np.array([self.weights.weight(bin_index, s.location.segment) for s in self.net.sensors])
            k = self.n_sensors
            ratio = np.zeros((k, k))
            for i in range(k):
                for j in range(k):
                    if self.connected[i, j]:
                        up, down = (i, j) if self._upstream_first[i, j] else (j, i)
                        ratio[i, j] = math.sqrt(w[up] / w[down])
            self._ratio_cache[bin_index] = ratio
        return self._ratio_cache[bin_index]

    def location_terms(self, loc, bin_index):
        """(distance, ratio) arrays over sensors for an arbitrary location."""
        key = (loc, bin_index)
        if key not in self._loc_cache:
            self.net.check_location(loc)
            k = self.n_sensors
            dist, ratio = np.zeros(k), np.zeros(k)
            for i, s in enumerate(self.net.sensors):
                order = flow_order(self.net, s.location, loc)
                if order is None:
                    continue
                up, down, d = order
                dist[i] = d
                ratio[i] = math.sqrt(self.weights.weight(bin_index, up.segment)
                                     / self.weights.weight(bin_index, down.segment))
            self._loc_cache[key] = (dist, ratio)
        return self._loc_cache[key]

    def correlation_matrix(self, bin_index, p):
        return np.where(self.connected, p.covariance(self.distance), 0.0) * self.sensor_ratio(bin_index)

    @cached_property
    def coordinates(self):
        """Planar (index, stream position) coordinates in [0, 1] for value embeddings."""
        k = self.n_sensors
        index = np.arange(k) / max(k - 1, 1)
        locs = [s.location for s in self.net.sensors]
        pos = np.zeros(k)
        for j in range(k):
            for i in range(k):
                d = self.net.directed_distance(locs[i], locs[j])
                if not math.isinf(d):
                    pos[j] = max(pos[j], d)
        if pos.max() > 0:
            pos = pos / pos.max()
        return np.column_stack([index, pos])

    @property
    def median_distance(self):
        d = self.distance[self.connected & (self.distance > 0)]
        return float(np.median(d)) if d.size else 1.0
