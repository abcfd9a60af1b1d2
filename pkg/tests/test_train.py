import math

import numpy as np
import pytest
from scipy import integrate

from stpp import autodiff as ad
from stpp.intensity import log_likelihood
from stpp.simulate import gen_hawkes, gen_nonhomo, gen_self_correcting, sequences, thinning_simulate
from stpp.train import (
    TrainConfig,
    TrainingError,
    _hawkes_objective,
    _padded,
    evaluate,
    fit,
    fit_hawkes_mle,
    hawkes_loglik,
    poisson_loglik,
    poisson_rates,
    prediction_prefixes,
    sequence_logliks,
)

from helpers import constant_params, seq, toy_params


def poisson_data(lam, T, n, seed, k=1):
    fn = lambda ts, times, sensors: np.full((len(ts), k), lam)  # noqa: E731
    return [thinning_simulate(fn, T, np.random.default_rng([seed, i])).sequence for i in range(n)]


def hawkes_brute(s, mu, alpha, beta):
    t = s.times
    ll = sum(math.log(mu + alpha * beta * np.sum(np.exp(-beta * (x - t[t < x])))) for x in t)
    return ll - mu * s.T - alpha * np.sum(1 - np.exp(-beta * (s.T - t)))


# config -----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch": 0}, {"lr": -1.0}, {"eta": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# fit --------------------------------------------------------------------------

def test_single_sequence_overfits():
    s = seq([0.1, 0.12, 0.15, 0.5, 0.52, 0.9])
    p0 = toy_params(n_heads=2, value_dim=2, mu0=1.0)
    p1, trace = fit(p0, [s], TrainConfig(epochs=60, batch=1, lr=2e-2))
    assert log_likelihood(p1, s) > log_likelihood(p0, s)
    assert trace[-1] > trace[0]


def test_zero_lr_keeps_parameters():
    data = [seq([0.2, 0.5]), seq([0.3])]
    p0 = toy_params()
    p1, trace = fit(p0, data, TrainConfig(epochs=3, lr=0.0))
    assert all(np.array_equal(p0.arrays[k], p1.arrays[k]) for k in p0.arrays)
    assert trace[0] == trace[1] == trace[2]
    assert trace[0] == pytest.approx(np.mean([log_likelihood(p0, s) for s in data]), rel=1e-12)


def test_fit_is_reproducible_and_thread_invariant():
    data = sequences(gen_hawkes(n=30, seed=4))
    p0 = toy_params(n_heads=2, value_dim=2, mu0=10.0)
    cfg = TrainConfig(epochs=2, batch=8, lr=1e-2, seed=3, max_pairs=3000)
    a, ta = fit(p0, data, cfg)
    b, tb = fit(p0, data, cfg)
    c, tc = fit(p0, data, TrainConfig(epochs=2, batch=8, lr=1e-2, seed=3, max_pairs=3000, threads=2))
    assert ta == tb
    for k in a.arrays:
        assert np.array_equal(a.arrays[k], b.arrays[k])
        np.testing.assert_allclose(a.arrays[k], c.arrays[k], rtol=1e-12, atol=1e-15)


def test_online_mode_trains():
    data = sequences(gen_hawkes(n=6, seed=5))
    p, trace = fit(toy_params(mu0=10.0), data, TrainConfig(epochs=2, batch=3, lr=1e-2, eta=5))
    assert len(trace) == 2 and all(np.isfinite(trace))


def test_non_finite_loss_reports_sequence():
    p = toy_params()
    p.arrays["out.W"] = np.array([np.nan])
    with pytest.raises(TrainingError, match=r"sequence \d+.*norms"):
        fit(p, [seq([0.2, 0.4]), seq([0.5, 0.6])], TrainConfig(epochs=1))


def test_empty_training_set():
    with pytest.raises(TrainingError):
        fit(toy_params(), [], TrainConfig())


@pytest.mark.parametrize("make", [
    lambda: gen_hawkes(n=100, seed=31),
    lambda: gen_self_correcting(n=100, seed=32),
    lambda: gen_nonhomo(1, n=100, seed=33),
    lambda: gen_nonhomo(2, n=100, seed=34),
], ids=["hawkes", "self-correcting", "nonhomo1", "nonhomo2"])
def test_smoothed_training_loss_settles(make):
    data = sequences(make())
    rate = max(poisson_rates(data)[0], 1e-3)
    p0 = toy_params(n_heads=3, value_dim=4, hidden=16, mu0=rate)
    _, trace = fit(p0, data, TrainConfig(epochs=16, batch=16, lr=1e-2, seed=0))
    loss = -np.convolve(trace, np.ones(5) / 5, mode="valid")
    half = loss[len(loss) // 2 - 1:]
    print("smoothed loss tail", np.round(half, 4))
    assert np.all(np.diff(half) <= 1e-9)


# evaluation -------------------------------------------------------------------

def test_prefixes_skip_first_event():
    items = prediction_prefixes([seq([0.1, 0.2, 0.3]), seq([0.5])])
    assert [(len(p), x.t) for p, x in items] == [(1, 0.2), (2, 0.3)]


def test_oracle_stub_predictor():
    data = [seq([0.1, 0.2, 0.3], sensors=[0, 1, 1]), seq([0.5, 0.7], sensors=[1, 0])]
    targets = [x for _, x in prediction_prefixes(data)]
    rep = evaluate(None, data, predictor=lambda ps: [(x.t, x.sensor) for x in targets])
    assert rep.accuracy == 1.0 and rep.time_mae == 0.0 and rep.n_predictions == 3


def test_uniform_random_location_baseline():
    rng = np.random.default_rng(0)
    data = [seq(np.sort(rng.uniform(0, 1, 30)), sensors=rng.integers(0, 14, 30)) for _ in range(200)]
    guess = np.random.default_rng(1)
    rep = evaluate(None, data, predictor=lambda ps: [(0.0, int(guess.integers(14))) for _ in ps])
    n = rep.n_predictions
    assert abs(rep.accuracy - 1 / 14) < 3 * math.sqrt((1 / 14) * (13 / 14) / n)
    assert 1 / 14 == pytest.approx(0.071, abs=1e-3)


def test_constant_model_time_mae_matches_quadrature():
    lam, T = 2.0, 3.0
    data = poisson_data(lam, T, 400, seed=8)
    p = constant_params(lam)
    rep = evaluate(p, data, n_pred=400)
    expected, errors = [], []
    for prefix, nxt in prediction_prefixes(data):
        t_n = prefix.times[-1]
        L = T - t_n
        # unnormalized estimator: integral of tau * f over [t_n, T], not a conditional mean
        t_hat = t_n * (1 - math.exp(-lam * L)) + (1 - math.exp(-lam * L) * (1 + lam * L)) / lam
        # the next event given that it happened: gap ~ Exp(lam) truncated to [0, L)
        dens = lambda x: lam * math.exp(-lam * x) / (1 - math.exp(-lam * L))  # noqa: E731
        e, _ = integrate.quad(lambda x: abs(t_n + x - t_hat) * dens(x), 0, L, points=[t_hat - t_n], limit=200)
        expected.append(e)
        errors.append(abs(nxt.t - t_hat))
    se = np.std(errors, ddof=1) / math.sqrt(len(errors))
    assert rep.n_predictions == len(errors)
    assert rep.time_mae == pytest.approx(np.mean(errors), abs=2e-3)
    assert abs(rep.time_mae - np.mean(expected)) < 3 * se
    assert rep.accuracy == 1.0


def test_loglik_average_matches_single_route():
    data = sequences(gen_hawkes(n=5, seed=2))
    p = toy_params(n_heads=2, mu0=10.0)
    got = sequence_logliks(p, data, max_pairs=500)
    np.testing.assert_allclose(got, [log_likelihood(p, s) for s in data], rtol=1e-12)


# baselines ----------------------------------------------------------------------

def test_poisson_mle_rate():
    data = [seq([0.1, 0.5], T=2.0), seq([], T=2.0), seq([0.3], T=2.0)]
    assert poisson_rates(data)[0] == pytest.approx(3 / 6)
    ll = poisson_loglik(data, [0.5])
    np.testing.assert_allclose(ll, [2 * math.log(0.5) - 1.0, -1.0, math.log(0.5) - 1.0])


def test_hawkes_loglik_matches_brute_force():
    data = sequences(gen_hawkes(n=6, seed=3))
    got = hawkes_loglik(data, 8.0, 0.6, 1.7)
    np.testing.assert_allclose(got, [hawkes_brute(s, 8.0, 0.6, 1.7) for s in data], rtol=1e-12)
    t, mask, horizon = _padded(data)
    raw = {k: np.array(float(np.log(np.expm1(v)))) for k, v in {"mu": 8.0, "alpha": 0.6, "beta": 1.7}.items()}
    tape = float(ad.value_of(_hawkes_objective(raw, t, mask, horizon)))
    assert tape == pytest.approx(got.sum(), rel=1e-12)


def test_hawkes_mle_on_poisson_data():
    data = poisson_data(10.0, 1.0, 300, seed=9)
    fit_ = fit_hawkes_mle(data, starts=2, steps=800)
    rate = sum(len(s) for s in data) / 300
    assert fit_.alpha < 0.05
    assert fit_.mu == pytest.approx(rate, rel=0.03)
    assert fit_.loglik >= poisson_loglik(data, [rate]).sum() - 1e-9


def test_hawkes_mle_degenerate():
    with pytest.raises(TrainingError, match="degenerate data"):
        fit_hawkes_mle([seq([])])
