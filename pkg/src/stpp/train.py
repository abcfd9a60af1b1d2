"""Maximum-likelihood training, evaluation metrics and the Hawkes MLE baseline."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .intensity import (
    DEFAULT_N_PRED,
    DEFAULT_N_SUB,
    evaluate_plan,
    likelihood_plan,
    plan_loglik,
    predict_many,
    Plan,
)
from .online import online_likelihood_plan

log = logging.getLogger(__name__)

DEFAULT_MAX_PAIRS = 250_000


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    n_sub: int = DEFAULT_N_SUB
    eta: int | None = None
    temporal_only: bool = False
    clip: float = 10.0
    max_pairs: int = DEFAULT_MAX_PAIRS
    threads: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if self.eta is not None and self.eta < 1:
            raise ValueError("eta must be >= 1")


def worker_count(threads=None):
    if threads is None:
        threads = int(os.environ.get("STPP_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass
class EvalReport:
    avg_loglik: float
    accuracy: float
    time_mae: float
    n_predictions: int
    trace: list = field(default_factory=list)

    def as_dict(self):
        return {"avg_loglik": self.avg_loglik, "accuracy": self.accuracy, "time_mae": self.time_mae,
                "n_predictions": self.n_predictions}


# plans and chunking -------------------------------------------------------------

def sequence_plan(params, seq, ctx=None, n_sub=DEFAULT_N_SUB, eta=None):
    if eta is None:
        return likelihood_plan(params.config, seq, ctx, n_sub)
    return online_likelihood_plan(params, seq, eta, ctx, n_sub)


def _chunks(plans, max_pairs):
    """Group consecutive plans so that each group stays under ``max_pairs`` pairs."""
    out, cur, size = [], [], 0
    for i, p in enumerate(plans):
        cost = p.n_pairs * len(p.pairs) + p.n_queries
        if cur and size + cost > max_pairs:
            out.append(cur)
            cur, size = [], 0
        cur.append(i)
        size += cost
    if cur:
        out.append(cur)
    return out


def sequence_logliks(params, seqs, ctx=None, n_sub=DEFAULT_N_SUB, eta=None, max_pairs=DEFAULT_MAX_PAIRS,
                     plans=None):
    """Log-likelihood of every sequence, evaluated in concatenated chunks."""
    plans = plans or [sequence_plan(params, s, ctx, n_sub, eta) for s in seqs]
    out = np.zeros(len(plans))
    for group in _chunks(plans, max_pairs):
        lam = np.asarray(evaluate_plan(params.arrays, params.config, Plan.concat([plans[i] for i in group]))[0])
        pos = 0
        for i in group:
            p = plans[i]
            part = lam[pos:pos + p.n_queries]
            out[i] = np.sum(np.log(part[p.log_index])) - np.sum(part * p.trap_weight)
            pos += p.n_queries
    return out


def _param_norms(arrays):
    return {k: float(np.linalg.norm(v)) for k, v in arrays.items()}


def _batch_gradient(params, plans, idx, max_pairs, pool):
    """Sum of log-likelihoods over ``idx`` and its gradient."""
    groups = _chunks([plans[i] for i in idx], max_pairs)

    def run(group):
        plan = Plan.concat([plans[idx[j]] for j in group])
        return ad.gradient(lambda v: plan_loglik(v, params.config, plan), params.arrays)

    results = list(pool.map(run, groups)) if pool is not None else [run(g) for g in groups]
    total = sum(r[0] for r in results)
    grads = {k: sum(r[1][k] for r in results) for k in params.arrays}
    return total, grads


def _diagnose(params, plans, idx, seqs):
    for i in idx:
        try:
            value, _ = ad.gradient(lambda v: plan_loglik(v, params.config, plans[i]), params.arrays)
        except FloatingPointError:
            return i
        if not np.isfinite(value):
            return i
    return None


def fit(params, train, config=None, ctx=None, on_epoch=None):
    """Mini-batch Adam on the negative mean log-likelihood.

    Returns (trained params, per-epoch average training log-likelihood).
    ``on_epoch(epoch, params, avg_loglik)`` is called after every epoch.
    """
    config = config or TrainConfig()
    train = list(train)
    if not train:
        raise TrainingError("no training sequences")
    rng = np.random.default_rng(config.seed)
    params = params.copy()
    state = ad.AdamState(lr=config.lr)
    online = config.eta is not None
    plans = None if online else [sequence_plan(params, s, ctx, config.n_sub) for s in train]
    workers = worker_count(config.threads)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    trace = []
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            total = 0.0
            for start in range(0, len(order), config.batch):
                idx = [int(i) for i in order[start:start + config.batch]]
                if online:
                    # retained sets depend on the current scores, so rebuild per step
                    step_plans = {i: sequence_plan(params, train[i], ctx, config.n_sub, config.eta) for i in idx}
                    batch_plans, local = [step_plans[i] for i in idx], list(range(len(idx)))
                else:
                    batch_plans, local = plans, idx
                try:
                    value, grads = _batch_gradient(params, batch_plans, local, config.max_pairs, pool)
                except FloatingPointError:
                    value, grads = np.nan, None
                if grads is None or not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    bad = _diagnose(params, batch_plans, local, train)
                    seq_index = idx[local.index(bad)] if bad is not None else None
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} (sequence {seq_index}); "
                        f"parameter norms {_param_norms(params.arrays)}")
                total += value
                grads = {k: -g / len(idx) for k, g in grads.items()}
                if config.clip:
                    grads, _ = ad.clip_by_global_norm(grads, config.clip)
                params = params.replace(ad.adam_step(params.arrays, grads, state))
            avg = total / len(train)
            trace.append(avg)
            log.info("epoch %d avg loglik %.6f", epoch, avg)
            if on_epoch is not None:
                on_epoch(epoch, params, avg)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, trace


def prediction_prefixes(seqs):
    """(prefix, target event) for every event that has at least one predecessor."""
    out = []
    for seq in seqs:
        for i in range(1, len(seq)):
            out.append((seq.prefix(i), seq.congestion[i]))
    return out


def evaluate(params, test, ctx=None, n_sub=DEFAULT_N_SUB, n_pred=DEFAULT_N_PRED, normalize=False, eta=None,
             predictor=None, max_pairs=DEFAULT_MAX_PAIRS):
    """Average test log-likelihood, next-location accuracy and next-time MAE.

    ``predictor(prefixes) -> [(t_hat, s_hat)]`` replaces the model's own
    predictions (useful for instrumentation checks).
    """
    test = list(test)
    ll = sequence_logliks(params, test, ctx, n_sub, eta, max_pairs) if params is not None else np.zeros(len(test))
    items = prediction_prefixes(test)
    prefixes = [p for p, _ in items]
    if predictor is None:
        preds = predict_many(params, prefixes, None, ctx, n_pred, normalize, max_pairs=max_pairs)
    else:
        preds = predictor(prefixes)
    if items:
        hits = [s_hat == target.sensor for (t_hat, s_hat), (_, target) in zip(preds, items)]
        errs = [abs(t_hat - target.t) for (t_hat, s_hat), (_, target) in zip(preds, items)]
        acc, mae = float(np.mean(hits)), float(np.mean(errs))
    else:
        acc, mae = float("nan"), float("nan")
    return EvalReport(float(np.mean(ll)) if len(ll) else float("nan"), acc, mae, len(items))


# baselines ----------------------------------------------------------------------

def poisson_rates(train, n_sensors=1):
    """Closed-form homogeneous-Poisson MLE: events per unit time per sensor."""
    counts = np.zeros(n_sensors)
    exposure = 0.0
    for seq in train:
        counts += np.bincount(seq.sensors, minlength=n_sensors)[:n_sensors]
        exposure += seq.T
    return counts / exposure


def poisson_loglik(seqs, rates):
    rates = np.asarray(rates, dtype=float)
    out = []
    for seq in seqs:
        c = np.bincount(seq.sensors, minlength=len(rates))
        with np.errstate(divide="ignore"):
            lr = np.where(c > 0, c * np.log(rates), 0.0)
        out.append(float(lr.sum() - rates.sum() * seq.T))
    return np.asarray(out)


def poisson_mle_loglik(train, test, n_sensors=1):
    """Average test log-likelihood of the Poisson MLE fitted on ``train``."""
    return float(np.mean(poisson_loglik(test, poisson_rates(train, n_sensors))))


@dataclass
class HawkesFit:
    mu: float
    alpha: float
    beta: float
    loglik: float  # total over the fitting data

    def as_tuple(self):
        return self.mu, self.alpha, self.beta


def _padded(seqs):
    n = max(len(s) for s in seqs)
    t = np.zeros((len(seqs), n))
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        t[i, :len(s)] = s.times
        mask[i, :len(s)] = 1.0
    horizon = np.array([s.T for s in seqs])
    return t, mask, horizon


def _hawkes_objective(v, t, mask, horizon):
    """Total log-likelihood of univariate exponential Hawkes, O(n) recursion per sequence."""
    mu = ad.softplus(v["mu"])
    alpha = ad.softplus(v["alpha"])
    beta = ad.softplus(v["beta"])
    s, n = t.shape
    ll = 0.0
    a = np.zeros(s)
    for i in range(n):
        if i > 0:
            gap = (t[:, i] - t[:, i - 1]) * mask[:, i]
            a = ad.exp(-(beta * gap)) * (a + 1.0)
        lam = mu + alpha * beta * a
        ll = ll + ad.reduce_sum(ad.log(lam) * mask[:, i])
    tail = ad.exp(-(beta * ((horizon[:, None] - t) * mask + (1.0 - mask) * 0.0)))
    comp = mu * float(horizon.sum()) + alpha * ad.reduce_sum((1.0 - tail) * mask)
    return ll - comp


def hawkes_loglik(seqs, mu, alpha, beta):
    """Per-sequence exact log-likelihood of lambda = mu + alpha * sum beta exp(-beta dt)."""
    out = []
    for seq in seqs:
        a, prev, ll = 0.0, None, 0.0
        for t in seq.times:
            if prev is not None:
                a = np.exp(-beta * (t - prev)) * (a + 1.0)
            ll += np.log(mu + alpha * beta * a)
            prev = t
        ll -= mu * seq.T + alpha * np.sum(1.0 - np.exp(-beta * (seq.T - seq.times)))
        out.append(float(ll))
    return np.asarray(out)


def fit_hawkes_mle(seqs, T=None, starts=5, steps=1500, lr=0.05, seed=0):
    """Multi-start Adam on softplus-reparameterized (mu, alpha, beta)."""
    seqs = list(seqs)
    if T is not None:
        seqs = [type(s)(T, s.congestion, s.incidents) for s in seqs]
    total = sum(len(s) for s in seqs)
    if not seqs or total == 0:
        raise TrainingError("degenerate data: no events to fit")
    t, mask, horizon = _padded(seqs)
    rate = total / horizon.sum()
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(starts):
        init = {
            "mu": rate * rng.uniform(0.3, 1.0),
            "alpha": rng.uniform(0.1, 0.9),
            "beta": float(np.exp(rng.uniform(np.log(0.2), np.log(5.0)))),
        }
        theta = {k: np.array(float(np.log(np.expm1(v)))) for k, v in init.items()}
        state = ad.AdamState(lr=lr)
        for step in range(steps):
            state.lr = lr * 0.05 ** (step / steps)
            value, grads = ad.gradient(lambda v: _hawkes_objective(v, t, mask, horizon), theta)
            theta = ad.adam_step(theta, {k: -g / len(seqs) for k, g in grads.items()}, state)
        value = float(ad.value_of(_hawkes_objective(theta, t, mask, horizon)))
        fit_ = HawkesFit(*(float(np.logaddexp(0.0, theta[k])) for k in ("mu", "alpha", "beta")), value)
        if best is None or fit_.loglik > best.loglik:
            best = fit_
    # alpha = 0 is the boundary of the parameter space (softplus never reaches it);
    # the nested Poisson model has a closed-form optimum there
    boundary = total * float(np.log(rate)) - rate * float(horizon.sum())
    if boundary > best.loglik:
        best = HawkesFit(float(rate), 0.0, best.beta, boundary)
    return best
