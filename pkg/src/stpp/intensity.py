"""Conditional intensity, likelihood, conditional density and next-event prediction.

Everything is evaluated through a *query plan*: a flat list of (time, sensor)
queries, each with its own history, plus the (query, past event) and
(query, active incident) pairs that feed the attention heads and the
exogenous term. Plans depend only on data, so the trainer builds them once
and re-evaluates them under new parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (
    batch_head,
    batch_normalize,
    batch_scores,
    batch_self_excitation,
    embed_events,
    head_prefix,
    score_features,
)
from .network import TailupParams

DEFAULT_N_SUB = 10
DEFAULT_N_PRED = 200
INIT_POSITIVE = 0.1


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class ModelConfig:
    n_sensors: int = 1
    n_heads: int = 3
    value_dim: int = 8
    hidden: int = 32
    temporal_only: bool = False
    time_scale: float = 1.0
    background_bins: int = 0
    background_period: float = 24.0

    def __post_init__(self):
        if self.n_sensors < 1 or self.n_heads < 1 or self.value_dim < 1 or self.hidden < 1:
            raise ValueError("sensor count, heads, value dimension and width must be >= 1")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    @property
    def gamma(self):
        return float(np.logaddexp(0.0, self.arrays["gamma_raw"]))

    @property
    def tailup(self):
        return TailupParams.from_raw(self.arrays["tailup.beta_raw"], self.arrays["tailup.sigma_raw"])

    @property
    def mu0(self):
        return np.logaddexp(0.0, self.arrays["mu0_raw"])

    def copy(self):
        return ModelParams(self.config, {k: np.array(v, dtype=float) for k, v in self.arrays.items()})

    def replace(self, arrays):
        return ModelParams(self.config, {k: np.asarray(v, dtype=float) for k, v in arrays.items()})

    def config_dict(self):
        return asdict(self.config)

    @classmethod
    def from_checkpoint(cls, arrays, config):
        return cls(ModelConfig(**config), arrays)


def init_params(config, seed=0, mu0=None, sigma=None):
    """Glorot-uniform weights, zero biases, positives at softplus ~= 0.1.

    ``mu0`` and ``sigma`` override the initial background rates and tail-up
    range (the range should match the network's distance scale).
    """
    rng = np.random.default_rng(seed)
    n_in = 1 if config.temporal_only else 2
    arrays = {}
    for m in range(config.n_heads):
        arrays.update(ad.init_mlp(rng, n_in, config.hidden, prefix=head_prefix(m)))
    for m in range(config.n_heads):
        a = np.sqrt(6.0 / (3 + config.value_dim))
        arrays[f"value{m}"] = rng.uniform(-a, a, size=(3, config.value_dim))
    mp = config.n_heads * config.value_dim
    a = np.sqrt(6.0 / (mp + 1))
    arrays["out.W"] = rng.uniform(-a, a, size=mp)
    arrays["out.b"] = np.array(0.0)
    raw = float(softplus_inv(INIT_POSITIVE))
    arrays["gamma_raw"] = np.array(raw)
    arrays["tailup.beta_raw"] = np.array(raw)
    arrays["tailup.sigma_raw"] = np.array(raw if sigma is None else float(softplus_inv(sigma)))
    if mu0 is None:
        arrays["mu0_raw"] = np.full(config.n_sensors, raw)
    else:
        arrays["mu0_raw"] = softplus_inv(np.broadcast_to(np.asarray(mu0, dtype=float), (config.n_sensors,))).copy()
    if config.background_bins:
        arrays["mu0_mult_raw"] = np.full(config.background_bins, float(softplus_inv(1.0)))
    return ModelParams(config, arrays)


# query plans ------------------------------------------------------------------

@dataclass
class Pairs:
    query: np.ndarray
    event: np.ndarray
    dt: np.ndarray
    dist: np.ndarray
    ratio: np.ndarray

    def __len__(self):
        return len(self.query)

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        i = np.zeros(0, dtype=np.intp)
        return cls(i, i, z, z, z)

    @classmethod
    def concat(cls, items, q_offsets, e_offsets):
        return cls(
            np.concatenate([p.query + o for p, o in zip(items, q_offsets)]).astype(np.intp),
            np.concatenate([p.event + o for p, o in zip(items, e_offsets)]).astype(np.intp),
            np.concatenate([p.dt for p in items]),
            np.concatenate([p.dist for p in items]),
            np.concatenate([p.ratio for p in items]),
        )


@dataclass
class Plan:
    q_time: np.ndarray
    q_sensor: np.ndarray
    has_history: np.ndarray
    embed: np.ndarray
    pairs: list  # one Pairs per head (may share objects)
    inc_query: np.ndarray
    inc_dist: np.ndarray
    inc_ratio: np.ndarray
    log_index: np.ndarray
    trap_weight: np.ndarray

    @property
    def n_queries(self):
        return len(self.q_time)

    @property
    def n_pairs(self):
        return max(len(p) for p in self.pairs)

    @classmethod
    def concat(cls, plans):
        if len(plans) == 1:
            return plans[0]
        q_off = np.cumsum([0] + [p.n_queries for p in plans[:-1]])
        e_off = np.cumsum([0] + [len(p.embed) for p in plans[:-1]])
        n_heads = len(plans[0].pairs)
        pairs = []
        for m in range(n_heads):
            if m > 0 and all(p.pairs[m] is p.pairs[0] for p in plans):
                pairs.append(pairs[0])
            else:
                pairs.append(Pairs.concat([p.pairs[m] for p in plans], q_off, e_off))
        return cls(
            np.concatenate([p.q_time for p in plans]),
            np.concatenate([p.q_sensor for p in plans]),
            np.concatenate([p.has_history for p in plans]),
            np.concatenate([p.embed for p in plans]),
            pairs,
            np.concatenate([p.inc_query + o for p, o in zip(plans, q_off)]).astype(np.intp),
            np.concatenate([p.inc_dist for p in plans]),
            np.concatenate([p.inc_ratio for p in plans]),
            np.concatenate([p.log_index + o for p, o in zip(plans, q_off)]).astype(np.intp),
            np.concatenate([p.trap_weight for p in plans]),
        )


def _sensor_coords(config, ctx):
    if ctx is not None:
        return ctx.coordinates
    k = config.n_sensors
    return np.column_stack([np.arange(k) / max(k - 1, 1), np.zeros(k)])


def build_plan(config, seq, ctx, q_time, q_sensor, n_hist, act_time, log_index=None, trap_weight=None,
               head_history=None):
    """Assemble the pairs for queries against one sequence.

    ``n_hist[q]`` is how many leading congestion events query ``q`` sees;
    ``act_time[q]`` is the time at which incident activity is judged.
    ``head_history`` optionally gives per-head, per-query index arrays in place
    of the leading-prefix rule (online attention).
    """
    q_time = np.asarray(q_time, dtype=float)
    q_sensor = np.asarray(q_sensor, dtype=np.intp)
    n_hist = np.asarray(n_hist, dtype=np.intp)
    act_time = np.asarray(act_time, dtype=float)
    nq = len(q_time)
    if q_sensor.size and q_sensor.max() >= config.n_sensors:
        raise ValueError(f"sensor index {q_sensor.max()} outside model with {config.n_sensors} sensors")
    times, sensors = seq.times, seq.sensors
    if sensors.size and sensors.max() >= config.n_sensors:
        raise ValueError(f"sensor index {sensors.max()} outside model with {config.n_sensors} sensors")
    embed = embed_events(times, sensors, seq.T, _sensor_coords(config, ctx))
    spatial = not config.temporal_only
    if spatial and ctx is None:
        raise ValueError("spatial model needs a network context (or use temporal_only)")

    def make_pairs(q_idx, e_idx):
        dt = q_time[q_idx] - times[e_idx]
        if spatial:
            dist = ctx.distance[q_sensor[q_idx], sensors[e_idx]]
            ratio = np.zeros(len(q_idx))
            bins = ctx.weights.bins_of(q_time[q_idx])
            for b in np.unique(bins):
                sel = bins == b
                ratio[sel] = ctx.sensor_ratio(int(b))[q_sensor[q_idx[sel]], sensors[e_idx[sel]]]
        else:
            dist = ratio = np.zeros(len(q_idx))
        return Pairs(q_idx.astype(np.intp), e_idx.astype(np.intp), dt, dist, ratio)

    if head_history is None:
        q_idx = np.repeat(np.arange(nq), n_hist)
        starts = np.repeat(np.cumsum(n_hist) - n_hist, n_hist)
        e_idx = np.arange(len(q_idx)) - starts
        shared = make_pairs(q_idx, e_idx)
        pairs = [shared] * config.n_heads
        has_history = (n_hist > 0).astype(float)
    else:
        pairs = []
        for m in range(config.n_heads):
            hist = head_history[m]
            lens = np.array([len(h) for h in hist], dtype=np.intp)
            q_idx = np.repeat(np.arange(nq), lens)
            e_idx = np.concatenate(hist).astype(np.intp) if len(hist) and lens.sum() else np.zeros(0, np.intp)
            pairs.append(make_pairs(q_idx, e_idx))
        has_history = (np.array([len(h) for h in head_history[0]]) > 0).astype(float)

    inc_q, inc_d, inc_r = [], [], []
    if seq.incidents:
        if ctx is None:
            raise ValueError("incidents need a network context")
        bins = ctx.weights.bins_of(q_time)
        for y in seq.incidents:
            active = np.nonzero((y.t <= act_time) & (act_time < y.t + y.z))[0]
            for b in np.unique(bins[active]):
                sel = active[bins[active] == b]
                dist, ratio = ctx.location_terms(y.location, int(b))
                inc_q.append(sel)
                inc_d.append(dist[q_sensor[sel]])
                inc_r.append(ratio[q_sensor[sel]])
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt))
    return Plan(
        q_time, q_sensor, has_history, embed, pairs,
        cat(inc_q, np.intp), cat(inc_d, float), cat(inc_r, float),
        np.zeros(0, dtype=np.intp) if log_index is None else np.asarray(log_index, dtype=np.intp),
        np.zeros(nq) if trap_weight is None else np.asarray(trap_weight, dtype=float),
    )


def _piece_grid(breaks, n_sub):
    """Trapezoid nodes and weights for consecutive pieces [breaks[i], breaks[i+1]]."""
    a, b = breaks[:-1], breaks[1:]
    u = np.linspace(0.0, 1.0, n_sub)
    nodes = a[:, None] + (b - a)[:, None] * u[None, :]
    w = np.full(n_sub, 1.0)
    w[0] = w[-1] = 0.5
    weights = ((b - a) / (n_sub - 1))[:, None] * w[None, :]
    return a, b, nodes, weights


def _breakpoints(seq, t0, t1, include_events=True):
    pts = [t0, t1]
    if include_events:
        pts.extend(seq.times)
    for y in seq.incidents:
        pts.extend([y.t, y.t + y.z])
    pts = np.unique(np.asarray(pts, dtype=float))
    return pts[(pts >= t0) & (pts <= t1)]


def compensator_queries(seq, t0, t1, sensors, n_sub=DEFAULT_N_SUB):
    """Query arrays whose trapezoid weights integrate lambda over [t0, t1] per sensor."""
    if n_sub < 2:
        raise ValueError("n_sub must be >= 2")
    breaks = _breakpoints(seq, t0, t1)
    a, b, nodes, weights = _piece_grid(breaks, n_sub)
    hist = np.searchsorted(seq.times, a, side="right")
    mid = 0.5 * (a + b)
    sensors = np.asarray(sensors, dtype=np.intp)
    k = len(sensors)
    shape = (k,) + nodes.shape
    q_time = np.broadcast_to(nodes, shape).ravel()
    q_sensor = np.broadcast_to(sensors[:, None, None], shape).ravel()
    n_hist = np.broadcast_to(hist[None, :, None], shape).ravel()
    act = np.broadcast_to(mid[None, :, None], shape).ravel()
    trap = np.broadcast_to(weights, shape).ravel()
    return q_time, q_sensor, n_hist, act, trap


def likelihood_plan(config, seq, ctx, n_sub=DEFAULT_N_SUB, head_history_fn=None):
    """Plan whose evaluation gives the log-likelihood of ``seq``."""
    times = seq.times
    n = len(times)
    e_hist = np.searchsorted(times, times, side="left")
    g_time, g_sensor, g_hist, g_act, g_trap = compensator_queries(
        seq, 0.0, seq.T, np.arange(config.n_sensors), n_sub)
    q_time = np.concatenate([times, g_time])
    q_sensor = np.concatenate([seq.sensors, g_sensor])
    n_hist = np.concatenate([e_hist, g_hist])
    act = np.concatenate([times, g_act])
    trap = np.concatenate([np.zeros(n), g_trap])
    head_history = None if head_history_fn is None else head_history_fn(n_hist)
    return build_plan(config, seq, ctx, q_time, q_sensor, n_hist, act,
                      log_index=np.arange(n), trap_weight=trap, head_history=head_history)


# evaluation -------------------------------------------------------------------

def evaluate_plan(arrays, config, plan):
    """Return (lambda, mu0, mu1, lambda_prime) at every query of ``plan``.

    ``arrays`` may hold ndarrays or autodiff variables.
    """
    nq = plan.n_queries
    mu0 = ad.take(ad.softplus(arrays["mu0_raw"]), plan.q_sensor)
    if config.background_bins:
        width = config.background_period / config.background_bins
        b = np.floor(np.mod(plan.q_time, config.background_period) / width).astype(np.intp)
        b = np.minimum(b, config.background_bins - 1)
        mu0 = mu0 * ad.take(ad.softplus(arrays["mu0_mult_raw"]), b)

    spatial = not config.temporal_only
    if spatial or len(plan.inc_query):
        beta = ad.softplus(arrays["tailup.beta_raw"])
        sigma = ad.softplus(arrays["tailup.sigma_raw"])

    if len(plan.inc_query):
        alpha_inc = beta * ad.exp(-plan.inc_dist / sigma) * plan.inc_ratio
        mu1 = ad.softplus(arrays["gamma_raw"]) * ad.segment_sum(alpha_inc, plan.inc_query, nq)
    else:
        mu1 = np.zeros(nq)

    heads = []
    cache = {}
    for m in range(config.n_heads):
        pairs = plan.pairs[m]
        key = id(pairs)
        if key not in cache:
            alpha = beta * ad.exp(-pairs.dist / sigma) * pairs.ratio if spatial else None
            cache[key] = (score_features(pairs.dt, alpha, config.time_scale), plan.embed[pairs.event])
        feats, pair_embed = cache[key]
        raw = batch_scores(arrays, m, feats)
        w = batch_normalize(raw, pairs.query, nq)
        heads.append(batch_head(arrays, m, w, pair_embed, pairs.query, nq))
    lam_prime = batch_self_excitation(arrays, heads, plan.has_history)
    lam = mu0 + mu1 + lam_prime
    return lam, mu0, mu1, lam_prime


def plan_loglik(arrays, config, plan):
    lam = evaluate_plan(arrays, config, plan)[0]
    events = ad.take(lam, plan.log_index)
    return ad.reduce_sum(ad.log(events)) - ad.reduce_sum(lam * plan.trap_weight)


class ZeroIntensityError(FloatingPointError):
    pass


# public single-query operations -----------------------------------------------

def _single(params, seq, t, k, ctx, n_hist):
    plan = build_plan(params.config, seq, ctx, [t], [k], [n_hist], [t])
    lam, mu0, mu1, lp = evaluate_plan(params.arrays, params.config, plan)
    return float(lam[0]), float(mu0[0]), float(mu1[0]), float(lp[0])


def background(params, t, k):
    cfg = params.config
    if not 0 <= k < cfg.n_sensors:
        raise ValueError(f"invalid sensor {k}")
    value = float(params.mu0[k])
    if cfg.background_bins:
        width = cfg.background_period / cfg.background_bins
        b = min(int(np.floor(np.mod(t, cfg.background_period) / width)), cfg.background_bins - 1)
        value *= float(np.logaddexp(0.0, params.arrays["mu0_mult_raw"][b]))
    return value


def exogenous(params, ctx, t, k, incidents):
    """gamma * sum of tail-up correlations to incidents being processed at t."""
    total = 0.0
    if not incidents:
        return 0.0
    p = params.tailup
    b = ctx.weights.bin_of(t)
    for y in incidents:
        if y.active(t):
            dist, ratio = ctx.location_terms(y.location, b)
            total += float(p.covariance(dist[k]) * ratio[k])
    return params.gamma * total


def intensity(params, t, k, seq, ctx=None):
    """lambda*(t, k) given the events of ``seq`` strictly before t."""
    return intensity_components(params, t, k, seq, ctx)[0]


def intensity_components(params, t, k, seq, ctx=None):
    """(lambda*, mu0, mu1, lambda') at (t, k)."""
    n_hist = int(np.searchsorted(seq.times, t, side="left"))
    return _single(params, seq, t, k, ctx, n_hist)


def compensator(params, seq, k, t0, t1, ctx=None, n_sub=DEFAULT_N_SUB):
    """Integral of lambda*(., k) over [t0, t1] by piecewise trapezoid."""
    if not t0 < t1:
        raise ValueError("need t0 < t1")
    q_time, q_sensor, n_hist, act, trap = compensator_queries(seq, t0, t1, [k], n_sub)
    plan = build_plan(params.config, seq, ctx, q_time, q_sensor, n_hist, act, trap_weight=trap)
    lam = evaluate_plan(params.arrays, params.config, plan)[0]
    return float(np.sum(lam * trap))


def log_likelihood(params, seq, ctx=None, n_sub=DEFAULT_N_SUB):
    plan = likelihood_plan(params.config, seq, ctx, n_sub)
    lam = evaluate_plan(params.arrays, params.config, plan)[0]
    at_events = lam[plan.log_index]
    if np.any(at_events <= 0):
        i = int(np.argmin(at_events))
        raise ZeroIntensityError(f"zero intensity at observed event {i}")
    return float(np.sum(np.log(at_events)) - np.sum(lam * plan.trap_weight))


def _future_grid_plan(params, prefix, ctx, grid):
    """Queries on ``grid`` for every sensor, seeing the whole prefix as history."""
    cfg = params.config
    k = cfg.n_sensors
    n = len(prefix)
    q_time = np.tile(grid, k)
    q_sensor = np.repeat(np.arange(k), len(grid))
    return build_plan(cfg, prefix, ctx, q_time, q_sensor, np.full(len(q_time), n), q_time)


def conditional_density(params, prefix, t, k, ctx=None, n_sub=DEFAULT_N_SUB):
    """f*(t, k) = lambda*(t, k) exp(-int_{t_n}^t lambda*(s, k) ds) after the prefix."""
    t_n = float(prefix.times[-1]) if len(prefix) else 0.0
    if t < t_n:
        raise ValueError("density is defined after the last prefix event")
    n = len(prefix)
    lam_t = _single(params, prefix, t, k, ctx, n)[0]
    if t == t_n:
        return lam_t
    breaks = _breakpoints(prefix, t_n, t, include_events=False)
    _, _, nodes, weights = _piece_grid(breaks, n_sub)
    q = nodes.ravel()
    plan = build_plan(params.config, prefix, ctx, q, np.full(len(q), k), np.full(len(q), n), q)
    lam = evaluate_plan(params.arrays, params.config, plan)[0]
    return lam_t * float(np.exp(-np.sum(lam * weights.ravel())))


def _trapz_cumulative(y, x):
    out = np.zeros_like(y)
    out[..., 1:] = np.cumsum(0.5 * (y[..., 1:] + y[..., :-1]) * np.diff(x), axis=-1)
    return out


def _predict_from_lambda(lam, grid, normalize):
    """lam has shape (K, n_grid)."""
    big_lambda = _trapz_cumulative(lam, grid)
    f = lam * np.exp(-big_lambda)
    total = f.sum(axis=0)
    t_hat = float(np.trapezoid(grid * total, grid))
    if normalize:
        mass = float(np.trapezoid(total, grid))
        if mass > 0:
            t_hat /= mass
    mass_k = np.trapezoid(f, grid, axis=1)
    s_hat = int(np.argmax(mass_k))  # first index wins ties
    return t_hat, s_hat


def predict_next(params, prefix, T=None, ctx=None, n_pred=DEFAULT_N_PRED, normalize=False):
    """(t_hat, s_hat) for the event following ``prefix``."""
    return predict_many(params, [prefix], T, ctx, n_pred, normalize)[0]


def predict_many(params, prefixes, T=None, ctx=None, n_pred=DEFAULT_N_PRED, normalize=False,
                 max_pairs=400_000):
    cfg = params.config
    out = []
    batch, grids, pairs = [], [], 0
    k = cfg.n_sensors

    def flush():
        if not batch:
            return
        lam = evaluate_plan(params.arrays, cfg, Plan.concat(batch))[0]
        pos = 0
        for grid in grids:
            size = k * len(grid)
            out.append(_predict_from_lambda(lam[pos:pos + size].reshape(k, len(grid)), grid, normalize))
            pos += size
        batch.clear()
        grids.clear()

    for prefix in prefixes:
        horizon = prefix.T if T is None else T
        t_n = float(prefix.times[-1]) if len(prefix) else 0.0
        grid = np.linspace(t_n, horizon, n_pred)
        plan = _future_grid_plan(params, prefix, ctx, grid)
        if pairs + plan.n_pairs > max_pairs:
            flush()
            pairs = 0
        batch.append(plan)
        grids.append(grid)
        pairs += plan.n_pairs
    flush()
    return out


@dataclass
class IntensityTrace:
    sensor: int
    times: np.ndarray
    lam: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    lam_prime: np.ndarray


def intensity_trace(params, seq, grid, sensors=None, ctx=None):
    """Intensity and its components on ``grid`` (history strictly before each point)."""
    cfg = params.config
    grid = np.asarray(grid, dtype=float)
    sensors = range(cfg.n_sensors) if sensors is None else sensors
    traces = []
    for k in sensors:
        n_hist = np.searchsorted(seq.times, grid, side="left")
        plan = build_plan(cfg, seq, ctx, grid, np.full(len(grid), k), n_hist, grid)
        lam, mu0, mu1, lp = (np.asarray(ad.value_of(v)) for v in evaluate_plan(params.arrays, cfg, plan))
        traces.append(IntensityTrace(k, grid, lam, np.broadcast_to(mu0, grid.shape).copy(),
                                     np.broadcast_to(mu1, grid.shape).copy(), lp))
    return traces
