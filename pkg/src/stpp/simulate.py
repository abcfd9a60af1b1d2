"""Thinning simulation and synthetic point-process generators.

Every generator is backed by a ground-truth model object exposing
``intensity(ts, times, sensors)`` and ``compensator(t, times, sensors)``;
the sampler only needs the former, the time-rescaling checks use the latter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import expm

from .events import EventSequence

DEFAULT_CAP = 500
PROBE_POINTS = 20
BOUND_FACTOR = 1.5


class SimulationError(RuntimeError):
    pass


def _history_mask(ts, times):
    return np.asarray(ts, dtype=float)[:, None] > np.asarray(times, dtype=float)[None, :]


@dataclass(frozen=True)
class Hawkes:
    """lambda(t) = mu + alpha * sum beta exp(-beta (t - t_j))."""

    mu: float = 10.0
    alpha: float = 1.0
    beta: float = 1.0
    n_sensors = 1

    def intensity(self, ts, times, sensors=None):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        times = np.asarray(times, dtype=float)
        lag = ts[:, None] - times[None, :]
        kern = np.where(lag > 0, np.exp(-self.beta * np.where(lag > 0, lag, 0.0)), 0.0)
        return (self.mu + self.alpha * self.beta * kern.sum(axis=1))[:, None]

    def compensator(self, t, times, sensors=None):
        times = np.asarray(times, dtype=float)
        past = times[times < t]
        return np.array([self.mu * t + self.alpha * np.sum(1.0 - np.exp(-self.beta * (t - past)))])


@dataclass(frozen=True)
class SelfCorrecting:
    """lambda(t) = exp(mu t - alpha N(t-))."""

    mu: float = 10.0
    alpha: float = 1.0
    n_sensors = 1

    def intensity(self, ts, times, sensors=None):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        n = _history_mask(ts, times).sum(axis=1)
        return np.exp(self.mu * ts - self.alpha * n)[:, None]

    def compensator(self, t, times, sensors=None):
        times = np.asarray(times, dtype=float)
        edges = np.concatenate([[0.0], times[times < t], [t]])
        total = 0.0
        for n, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
            total += math.exp(-self.alpha * n) * (math.exp(self.mu * b) - math.exp(self.mu * a)) / self.mu
        return np.array([total])


@dataclass(frozen=True)
class NonHomogeneous:
    """Sum of scaled normal-density bumps: sum_i c_i u_i phi(s_i (t - m_i))."""

    amplitudes: tuple
    centers: tuple
    scales: tuple
    n_sensors = 1

    def intensity(self, ts, times=None, sensors=None):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        lam = np.zeros_like(ts)
        for a, m, s in zip(self.amplitudes, self.centers, self.scales):
            lam += a * stats.norm.pdf(s * (ts - m))
        return lam[:, None]

    def compensator(self, t, times=None, sensors=None):
        total = 0.0
        for a, m, s in zip(self.amplitudes, self.centers, self.scales):
            total += a * (stats.norm.cdf(s * (t - m)) - stats.norm.cdf(-s * m)) / s
        return np.array([total])


def nonhomo_model(variant, u):
    u = np.atleast_1d(u)
    if variant == 1:
        return NonHomogeneous((100.0 * u[0],), (0.5,), (1.0,))
    if variant == 2:
        return NonHomogeneous((50.0 * u[0], 50.0 * u[1]), (0.35, 0.75), (6.0, 6.0))
    raise ValueError("non-homogeneous variant must be 1 or 2")


@dataclass(frozen=True)
class NetworkHawkes:
    """Multivariate Hawkes with gains fixed at the triggering event's time bin.

    lambda_k(t) = mu_k + sum_j G_{bin(t_j)}[k, s_j] beta exp(-beta (t - t_j))
    """

    mu: np.ndarray
    gains: dict  # bin index -> (K, K) matrix, row = excited sensor
    beta: float
    bin_hours: float = math.inf

    @property
    def n_sensors(self):
        return len(self.mu)

    def gain(self, t):
        if math.isinf(self.bin_hours):
            return self.gains[min(self.gains)]
        b = int(math.floor(t / self.bin_hours))
        return self.gains[min(max(b, min(self.gains)), max(self.gains))]

    def _event_gains(self, times, sensors):
        if len(times) == 0:
            return np.zeros((self.n_sensors, 0))
        return np.column_stack([self.gain(t)[:, s] for t, s in zip(times, sensors)])

    def intensity(self, ts, times, sensors):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        times = np.asarray(times, dtype=float)
        g = self._event_gains(times, sensors)
        lag = ts[:, None] - times[None, :]
        kern = np.where(lag > 0, self.beta * np.exp(-self.beta * np.where(lag > 0, lag, 0.0)), 0.0)
        return self.mu[None, :] + kern @ g.T

    def compensator(self, t, times, sensors):
        times = np.asarray(times, dtype=float)
        keep = times < t
        g = self._event_gains(times[keep], np.asarray(sensors)[keep])
        return self.mu * t + g @ (1.0 - np.exp(-self.beta * (t - times[keep])))

    def expected_counts(self, T):
        """E[N_k(T)] for a single gain matrix, from the mean-intensity ODE."""
        if len(self.gains) != 1:
            raise ValueError("closed form needs time-invariant gains")
        (g,) = self.gains.values()
        k = self.n_sensors
        # state (u, N): u' = mu + beta (G - I) u, N' = mu + beta G u
        a = np.zeros((2 * k + 1, 2 * k + 1))
        a[:k, :k] = self.beta * (g - np.eye(k))
        a[:k, -1] = self.mu
        a[k:2 * k, :k] = self.beta * g
        a[k:2 * k, -1] = self.mu
        x0 = np.zeros(2 * k + 1)
        x0[-1] = 1.0
        return (expm(a * T) @ x0)[k:2 * k]


def network_hawkes_model(index, mu0, alpha, beta_time, tailup):
    """Gains alpha * tail-up correlation for every weight bin of ``index``."""
    gains = {b: alpha * index.correlation_matrix(b, tailup) for b in index.weights.bins}
    return NetworkHawkes(np.asarray(mu0, dtype=float), gains, beta_time, index.weights.bin_hours)


# thinning ---------------------------------------------------------------------

@dataclass
class SimResult:
    sequence: EventSequence
    truncated: bool = False
    meta: dict = field(default_factory=dict)


def thinning_simulate(intensity_fn, T, rng, cap=DEFAULT_CAP, window=None):
    """Ogata thinning with an adaptive probe-grid bound.

    ``intensity_fn(ts, times, sensors)`` returns an (len(ts), K) array of
    intensities given the history. Over each window the bound is 1.5x the
    largest probe value; if a candidate exceeds it the window is halved and
    the step retried.
    """
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    window = T / 10.0 if window is None else window
    times, sensors = [], []
    t = 0.0
    step = window
    while t < T:
        w = min(step, T - t)
        probes = t + np.linspace(0.0, w, PROBE_POINTS)
        lam = np.atleast_2d(intensity_fn(probes, times, sensors))
        bound = BOUND_FACTOR * float(lam.sum(axis=1).max())
        if bound <= 0.0:
            t += w
            step = window
            continue
        cand = t + rng.exponential(1.0 / bound)
        if cand >= t + w:
            t += w
            step = window
            continue
        lam_c = np.atleast_2d(intensity_fn([cand], times, sensors))[0]
        total = float(lam_c.sum())
        if total > bound:
            step = w / 2.0
            if step < 1e-12 * max(T, 1.0):
                raise SimulationError("intensity bound could not be established")
            continue
        t = cand
        if rng.uniform() * bound <= total:
            if len(times) >= cap:
                return SimResult(EventSequence.from_times(times, T, sensors), truncated=True)
            k = int(rng.choice(len(lam_c), p=lam_c / total)) if len(lam_c) > 1 else 0
            times.append(cand)
            sensors.append(k)
        step = window
    return SimResult(EventSequence.from_times(times, T, sensors))


def _rng(seed, i):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(i)]))


def _simulate_many(make_model, T, n, seed, cap):
    out = []
    for i in range(n):
        rng = _rng(seed, i)
        model, meta = make_model(rng)
        res = thinning_simulate(model.intensity, T, rng, cap)
        res.meta.update(meta)
        res.meta["model"] = model
        out.append(res)
    return out


def gen_hawkes(mu=10.0, alpha=1.0, beta=1.0, T=1.0, n=500, seed=0, cap=DEFAULT_CAP):
    if not (mu > 0 and beta > 0 and alpha >= 0):
        raise ValueError("need mu > 0, beta > 0, alpha >= 0")
    model = Hawkes(mu, alpha, beta)
    return _simulate_many(lambda rng: (model, {}), T, n, seed, cap)


def gen_self_correcting(mu=10.0, alpha=1.0, T=1.0, n=500, seed=0, cap=DEFAULT_CAP):
    if not (mu > 0 and alpha > 0):
        raise ValueError("need mu > 0, alpha > 0")
    model = SelfCorrecting(mu, alpha)
    return _simulate_many(lambda rng: (model, {}), T, n, seed, cap)


def gen_nonhomo(variant=1, T=1.0, n=500, seed=0, cap=DEFAULT_CAP):
    n_u = 1 if variant == 1 else 2

    def make(rng):
        u = rng.uniform(size=n_u)
        return nonhomo_model(variant, u), {"u": u.tolist()}

    return _simulate_many(make, T, n, seed, cap)


def gen_network_hawkes(index, tailup, mu0, alpha=0.5, beta_time=1.0, T=1.0, n=500, seed=0, cap=DEFAULT_CAP):
    model = network_hawkes_model(index, mu0, alpha, beta_time, tailup)
    return _simulate_many(lambda rng: (model, {}), T, n, seed, cap)


GENERATORS = {
    "hawkes": gen_hawkes,
    "self-correcting": gen_self_correcting,
    "nonhomo1": lambda **kw: gen_nonhomo(variant=1, **kw),
    "nonhomo2": lambda **kw: gen_nonhomo(variant=2, **kw),
    "network-hawkes": gen_network_hawkes,
}


@dataclass
class GeneratorSpec:
    kind: str
    params: dict = field(default_factory=dict)
    T: float = 1.0
    n: int = 500
    seed: int = 0
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.kind not in GENERATORS and self.kind != "fitted-model":
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.cap < 1:
            raise ValueError("cap must be >= 1")


def generate(spec, **context):
    """Run a GeneratorSpec; ``context`` supplies network objects when needed."""
    if spec.kind == "fitted-model":
        return gen_fitted(T=spec.T, n=spec.n, seed=spec.seed, cap=spec.cap, **context)
    fn = GENERATORS[spec.kind]
    return fn(T=spec.T, n=spec.n, seed=spec.seed, cap=spec.cap, **spec.params, **context)


class ModelProcess:
    """A trained model seen as a point process on [0, T) without incidents."""

    def __init__(self, params, ctx=None, T=1.0, n_sub=50):
        self.params = params
        self.ctx = ctx
        self.T = T
        self.n_sub = n_sub

    @property
    def n_sensors(self):
        return self.params.config.n_sensors

    def _seq(self, times, sensors):
        return EventSequence.from_times(times, self.T, sensors)

    def intensity(self, ts, times, sensors):
        from .intensity import build_plan, evaluate_plan

        cfg = self.params.config
        seq = self._seq(times, sensors)
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        k = cfg.n_sensors
        q_time = np.tile(ts, k)
        q_sensor = np.repeat(np.arange(k), len(ts))
        n_hist = np.searchsorted(seq.times, q_time, side="left")
        plan = build_plan(cfg, seq, self.ctx, q_time, q_sensor, n_hist, q_time)
        lam = evaluate_plan(self.params.arrays, cfg, plan)[0]
        return np.asarray(lam).reshape(k, len(ts)).T

    def compensator(self, t, times, sensors):
        from .intensity import compensator

        if t <= 0:
            return np.zeros(self.n_sensors)
        seq = self._seq(times, sensors)
        return np.array([compensator(self.params, seq, k, 0.0, t, self.ctx, self.n_sub)
                         for k in range(self.n_sensors)])


def gen_fitted(params, ctx=None, T=1.0, n=500, seed=0, cap=DEFAULT_CAP):
    """Sample congestion sequences from a trained model (no incidents)."""
    model = ModelProcess(params, ctx, T)
    return _simulate_many(lambda rng: (model, {}), T, n, seed, cap)


def sequences(results, drop_truncated=True):
    return [r.sequence for r in results if not (drop_truncated and r.truncated)]


# time rescaling ---------------------------------------------------------------

def rescaled_times(seq, model):
    """Per-sensor compensator values at that sensor's events, plus Lambda_k(T)."""
    times, sensors = seq.times, seq.sensors
    taus = []
    for k in range(model.n_sensors):
        own = times[sensors == k]
        taus.append(np.array([float(model.compensator(t, times, sensors)[k]) for t in own]))
    return taus, np.asarray(model.compensator(seq.T, times, sensors), dtype=float)


def rescaled_intervals(seqs_models):
    """Exp(1) intervals from (sequence, model) pairs.

    Each window's rescaled events form a unit-rate Poisson process on
    [0, Lambda_k(T)]; laying windows end to end keeps that property, so the
    gaps that straddle window boundaries are used too. Taking only the
    complete gaps inside each window would bias them short.
    """
    streams = {}
    for seq, model in seqs_models:
        taus, total = rescaled_times(seq, model)
        for k, tau in enumerate(taus):
            offset, chunks = streams.setdefault(k, [0.0, []])
            chunks.append(offset + tau)
            streams[k][0] = offset + float(total[k])
    out = [np.diff(np.concatenate([[0.0]] + chunks)) for _, chunks in streams.values()]
    return np.concatenate(out) if out else np.zeros(0)


def ks_time_rescaling(results, n_intervals=2000, drop_truncated=True):
    """KS test of the first ``n_intervals`` rescaled intervals against Exp(1)."""
    pairs = []
    count = 0
    for r in results:
        if drop_truncated and r.truncated:
            continue
        pairs.append((r.sequence, r.meta["model"]))
        count += len(r.sequence)
        if count >= n_intervals + r.meta["model"].n_sensors:
            break
    x = rescaled_intervals(pairs)
    if len(x) < n_intervals:
        raise SimulationError(f"only {len(x)} intervals available, need {n_intervals}")
    return stats.kstest(x[:n_intervals], "expon"), x
