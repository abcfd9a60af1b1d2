"""Congestion and incident events, count-series extraction and dataset files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .network import NetworkLocation

MIN_INCIDENT_HOURS = 0.25
TIME_DIGITS = 9


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class CongestionEvent:
    t: float
    sensor: int = 0


@dataclass(frozen=True)
class IncidentEvent:
    t: float
    location: NetworkLocation
    z: float

    def __post_init__(self):
        if not self.z > 0:
            raise DatasetError("incident processing time must be positive")

    @property
    def end(self):
        return self.t + self.z

    def active(self, t):
        return self.t <= t < self.t + self.z


def _incident_key(y):
    return (y.t, y.location.segment, y.location.offset)


@dataclass(frozen=True, eq=False)
class EventSequence:
    """One observation window [0, T) of congestion events and incidents."""

    T: float
    congestion: tuple = ()
    incidents: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "congestion", tuple(self.congestion))
        object.__setattr__(self, "incidents", tuple(self.incidents))
        if not self.T > 0:
            raise DatasetError("horizon must be positive")
        prev = None
        for x in self.congestion:
            if not 0 <= x.t:
                raise DatasetError(f"negative event time {x.t}")
            if x.t >= self.T:
                raise DatasetError(f"time beyond horizon: {x.t} >= {self.T}")
            if x.sensor < 0:
                raise DatasetError(f"invalid sensor {x.sensor}")
            if prev is not None and (x.t, x.sensor) < (prev.t, prev.sensor):
                raise DatasetError("congestion events are not sorted by time")
            prev = x
        prev = None
        for y in self.incidents:
            if not 0 <= y.t:
                raise DatasetError(f"negative incident time {y.t}")
            if y.t >= self.T:
                raise DatasetError(f"time beyond horizon: {y.t} >= {self.T}")
            if prev is not None and _incident_key(y) < _incident_key(prev):
                raise DatasetError("incidents are not sorted by time")
            prev = y

    def __len__(self):
        return len(self.congestion)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (self.T, self.congestion, self.incidents) == (other.T, other.congestion, other.incidents)

    __hash__ = None

    @cached_property
    def times(self):
        return np.array([x.t for x in self.congestion], dtype=float)

    @cached_property
    def sensors(self):
        return np.array([x.sensor for x in self.congestion], dtype=np.intp)

    def prefix(self, n):
        """The first n congestion events plus incidents called no later than the n-th."""
        events = self.congestion[:n]
        t_n = events[-1].t if events else 0.0
        return EventSequence(self.T, events, tuple(y for y in self.incidents if y.t <= t_n))

    @classmethod
    def from_times(cls, times, T, sensors=None):
        times = np.asarray(times, dtype=float)
        sensors = np.zeros(len(times), dtype=int) if sensors is None else np.asarray(sensors)
        order = np.lexsort((sensors, times))
        return cls(float(T), tuple(CongestionEvent(float(times[i]), int(sensors[i])) for i in order))


@dataclass(frozen=True)
class CountSeries:
    sensor: int
    counts: tuple
    bin_minutes: float = 5.0
    start_minutes: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(self.counts))
        if not self.bin_minutes > 0:
            raise DatasetError("bin duration must be positive")
        if any(c < 0 for c in self.counts):
            raise DatasetError("counts must be nonnegative")


def default_threshold(series, n_std=2.0):
    """Mean plus ``n_std`` standard deviations of the series' counts."""
    c = np.asarray(series.counts, dtype=float)
    if c.size == 0:
        return math.inf
    return float(c.mean() + n_std * c.std())


def detect_congestion(series, threshold):
    """One event at the start of every bin where counts cross the threshold upward."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    events = []
    below = True
    for i, c in enumerate(series.counts):
        if c >= threshold and below:
            t = (series.start_minutes + i * series.bin_minutes) / 60.0
            events.append(CongestionEvent(t, series.sensor))
        below = c < threshold
    return events


def load_counts(path):
    """Read ``sensor,bin_start_min,count`` rows into one CountSeries per sensor."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["sensor", "bin_start_min", "count"]:
            raise DatasetError("count file header must be sensor,bin_start_min,count")
        for line, row in enumerate(reader, start=2):
            try:
                rows.setdefault(int(row["sensor"]), []).append((float(row["bin_start_min"]), int(row["count"])))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"malformed count row at line {line}: {exc}") from None
    out = []
    for sensor, entries in sorted(rows.items()):
        entries.sort()
        starts = np.array([s for s, _ in entries])
        gaps = np.diff(starts)
        bin_min = float(gaps[0]) if len(gaps) else 5.0
        if len(gaps) and not np.allclose(gaps, bin_min):
            raise DatasetError(f"sensor {sensor}: count bins are not evenly spaced")
        out.append(CountSeries(sensor, [c for _, c in entries], bin_min, float(starts[0])))
    return out


def extract_sequence(series_list, T, thresholds=None, incidents=(), min_z=MIN_INCIDENT_HOURS):
    """Detect congestion on every series and assemble one EventSequence."""
    thresholds = thresholds or {}
    events = []
    for s in series_list:
        thr = thresholds.get(s.sensor, default_threshold(s))
        events.extend(e for e in detect_congestion(s, thr) if e.t < T)
    events.sort()
    kept = sorted((y for y in incidents if y.z >= min_z), key=_incident_key)
    return EventSequence(T, events, kept)


# JSON-lines dataset files -----------------------------------------------------

def _round(t):
    return float(f"{t:.{TIME_DIGITS}g}")


def sequence_to_dict(seq):
    return {
        "T": _round(seq.T),
        "congestion": [{"t": _round(x.t), "sensor": int(x.sensor)} for x in seq.congestion],
        "incidents": [
            {"t": _round(y.t), "segment": y.location.segment, "offset_m": _round(y.location.offset),
             "z": _round(y.z)}
            for y in seq.incidents
        ],
    }


def _check_keys(obj, allowed, what, line):
    if not isinstance(obj, dict):
        raise DatasetError(f"line {line}: {what} must be an object")
    extra = set(obj) - allowed
    if extra:
        raise DatasetError(f"line {line}: unknown {what} field(s) {sorted(extra)}")


def sequence_from_dict(obj, line=1):
    _check_keys(obj, {"T", "congestion", "incidents"}, "sequence", line)
    try:
        T = float(obj["T"])
        congestion = []
        for e in obj.get("congestion", []):
            _check_keys(e, {"t", "sensor"}, "congestion event", line)
            congestion.append(CongestionEvent(float(e["t"]), int(e["sensor"])))
        incidents = []
        for e in obj.get("incidents", []):
            _check_keys(e, {"t", "segment", "offset_m", "z"}, "incident", line)
            incidents.append(IncidentEvent(float(e["t"]), NetworkLocation(str(e["segment"]), float(e["offset_m"])),
                                           float(e["z"])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise DatasetError(f"line {line}: {exc}") from None
        raise DatasetError(f"line {line}: malformed record ({exc!r})") from None
    try:
        return EventSequence(T, congestion, incidents)
    except DatasetError as exc:
        raise DatasetError(f"line {line}: {exc}") from None


def load_dataset(path, network=None):
    seqs = []
    with open(path) as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line}: malformed JSON ({exc.msg})") from None
            seq = sequence_from_dict(obj, line)
            if network is not None:
                check_against_network(seq, network)
            seqs.append(seq)
    return seqs


def save_dataset(seqs, path):
    with open(path, "w") as fh:
        for seq in seqs:
            fh.write(json.dumps(sequence_to_dict(seq), separators=(",", ":")) + "\n")


def check_against_network(seq, network):
    k = network.n_sensors
    for x in seq.congestion:
        if x.sensor >= k:
            raise DatasetError(f"sensor {x.sensor} not in network with {k} sensors")
    for y in seq.incidents:
        network.check_location(y.location)


def split_dataset(seqs, ratio=0.8, seed=0):
    """Deterministic shuffled split; the train part has round-half-up(ratio * N) sequences."""
    seqs = list(seqs)
    if len(seqs) < 2:
        raise ValueError("need at least 2 sequences to split")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    n_train = int(math.floor(ratio * len(seqs) + 0.5))
    order = np.random.default_rng(seed).permutation(len(seqs))
    return [seqs[i] for i in order[:n_train]], [seqs[i] for i in order[n_train:]]
