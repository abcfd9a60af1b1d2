"""Input checks shared by the estimators."""
from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .events import CountSeries, EventSequence


def check_sequences(X, n_sensors=None, allow_empty=False):
    """Return ``X`` as a list of EventSequence, checking sensor indices."""
    if isinstance(X, EventSequence):
        X = [X]
    if not isinstance(X, Iterable):
        raise TypeError(f"expected a list of EventSequence, got {type(X).__name__}")
    seqs = list(X)
    if not seqs and not allow_empty:
        raise ValueError("need at least one sequence")
    for i, s in enumerate(seqs):
        if not isinstance(s, EventSequence):
            raise TypeError(f"item {i} is {type(s).__name__}, not EventSequence")
        if n_sensors is not None and len(s) and int(s.sensors.max()) >= n_sensors:
            raise ValueError(f"sequence {i} uses sensor {int(s.sensors.max())} but the model has {n_sensors}")
    return seqs


def check_count_series(X):
    if isinstance(X, CountSeries):
        X = [X]
    series = list(X)
    for i, s in enumerate(series):
        if not isinstance(s, CountSeries):
            raise TypeError(f"item {i} is {type(s).__name__}, not CountSeries")
    return series


def infer_n_sensors(seqs, network=None):
    if network is not None:
        return network.n_sensors
    top = [int(s.sensors.max()) for s in seqs if len(s)]
    return max(top) + 1 if top else 1


def check_positive(name, value, allow_none=False):
    if value is None and allow_none:
        return value
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be a positive number, got {value!r}")
    return value
