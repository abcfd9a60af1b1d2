"""Bounded-memory event selection for online attention.

Each head keeps at most ``eta`` past events: when a new event arrives it is
scored against the retained ones, the normalized scores are folded into
running averages, and once more than ``eta`` events have been seen the
retained event with the lowest average (oldest on ties) is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import batch_scores, score_features
from .events import EventSequence
from .intensity import (
    DEFAULT_N_SUB,
    build_plan,
    evaluate_plan,
    likelihood_plan,
)


@dataclass
class OnlineSelection:
    eta: int
    n_heads: int
    horizon: float = 1.0  # window length T, used by the value embeddings
    events: list = field(default_factory=list)
    retained: list = None
    sums: list = None
    counts: list = None
    score_evals: int = 0

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError("eta must be a positive integer")
        if self.retained is None:
            self.retained = [[] for _ in range(self.n_heads)]
            self.sums = [{} for _ in range(self.n_heads)]
            self.counts = [{} for _ in range(self.n_heads)]

    @property
    def n_observed(self):
        return len(self.events)

    def average(self, m, j):
        return self.sums[m][j] / self.counts[m][j]

    def snapshot(self):
        return [list(r) for r in self.retained]


def observe(state, event, score_fn):
    """Fold ``event`` into ``state``; ``score_fn(m, event, past_events)`` gives raw scores."""
    if state.events and event.t <= state.events[-1].t:
        raise ValueError("online events must arrive in strictly increasing time order")
    i = len(state.events)
    state.events.append(event)
    for m in range(state.n_heads):
        past = state.retained[m]
        if past:
            raw = np.asarray(score_fn(m, event, [state.events[j] for j in past]), dtype=float)
            state.score_evals += len(past)
            weights = raw / raw.sum()
            for j, v in zip(past, weights):
                state.sums[m][j] = state.sums[m].get(j, 0.0) + float(v)
                state.counts[m][j] = state.counts[m].get(j, 0) + 1
        candidates = list(past)
        past.append(i)
        if i + 1 > state.eta:
            # ``candidates`` is in arrival order, so min() keeps the oldest on ties
            drop = min(candidates, key=lambda j: state.average(m, j))
            past.remove(drop)
    return state


def model_score_fn(params, ctx=None):
    """Raw head scores under a fitted model, for use with :func:`observe`."""
    cfg = params.config
    arrays = params.arrays

    def score_fn(m, event, past):
        dt = np.array([event.t - x.t for x in past])
        alpha = None
        if not cfg.temporal_only:
            p = params.tailup
            b = ctx.weights.bin_of(event.t)
            ratio = ctx.sensor_ratio(b)[event.sensor, [x.sensor for x in past]]
            dist = ctx.distance[event.sensor, [x.sensor for x in past]]
            alpha = p.beta * np.exp(-dist / p.sigma) * ratio
        return batch_scores(arrays, m, score_features(dt, alpha, cfg.time_scale))

    return score_fn


def run_selection(params, seq, eta, ctx=None):
    """Replay a sequence through the selector; returns the state and per-step snapshots."""
    state = OnlineSelection(eta, params.config.n_heads, seq.T)
    score_fn = model_score_fn(params, ctx)
    snapshots = [state.snapshot()]
    for x in seq.congestion:
        observe(state, x, score_fn)
        snapshots.append(state.snapshot())
    return state, snapshots


def online_intensity(params, state, t, k, incidents=(), ctx=None):
    """lambda*(t, k) with each head attending only to its retained events."""
    if state.events and t <= state.events[-1].t:
        raise ValueError("query time must follow the last observed event")
    seq = EventSequence(state.horizon, tuple(state.events), tuple(y for y in incidents if y.t <= t))
    hist = [[np.asarray(r, dtype=np.intp)] for r in state.retained]
    plan = build_plan(params.config, seq, ctx, [t], [k], [len(state.events)], [t], head_history=hist)
    return float(evaluate_plan(params.arrays, params.config, plan)[0][0])


def online_likelihood_plan(params, seq, eta, ctx=None, n_sub=DEFAULT_N_SUB):
    """Likelihood plan where a query after the h-th event sees the retained sets after step h."""
    _, snapshots = run_selection(params, seq, eta, ctx)

    def head_history(n_hist):
        return [[np.asarray(snapshots[h][m], dtype=np.intp) for h in n_hist]
                for m in range(params.config.n_heads)]

    return likelihood_plan(params.config, seq, ctx, n_sub, head_history_fn=head_history)


def online_log_likelihood(params, seq, eta, ctx=None, n_sub=DEFAULT_N_SUB):
    plan = online_likelihood_plan(params, seq, eta, ctx, n_sub)
    lam = evaluate_plan(params.arrays, params.config, plan)[0]
    return float(np.sum(np.log(lam[plan.log_index])) - np.sum(lam * plan.trap_weight))
