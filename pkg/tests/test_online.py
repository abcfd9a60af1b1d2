import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpp.events import CongestionEvent
from stpp.intensity import intensity, log_likelihood
from stpp.online import OnlineSelection, observe, online_intensity, online_log_likelihood, run_selection

from helpers import replay, seq, toy_params


def table_scores(table):
    def score_fn(m, event, past):
        i = int(round(event.t * 10))
        return [table[(i, int(round(x.t * 10)))] for x in past]
    return score_fn


def events(n):
    return [CongestionEvent(i / 10, 0) for i in range(n)]


def test_hand_replay_eta_two():
    scores = {(1, 0): 2.0, (2, 0): 1.0, (2, 1): 3.0, (3, 1): 1.0, (3, 2): 1.0}
    state = OnlineSelection(eta=2, n_heads=1)
    steps = []
    for x in events(4):
        observe(state, x, table_scores(scores))
        steps.append(state.snapshot()[0])
    # step 2: avg(0) = (1 + .25)/2 = .625 < avg(1) = .75 -> drop 0
    # step 3: avg(1) = (.75 + .5)/2 = .625 > avg(2) = .5 -> drop 2
    assert steps == [[0], [0, 1], [1, 2], [1, 3]]
    assert state.average(0, 1) == pytest.approx(0.625)
    assert steps == [h for h in replay(scores, 4, 2)]


def test_hand_replay_eta_one():
    scores = {(1, 0): 5.0, (2, 1): 1.0}
    state = OnlineSelection(eta=1, n_heads=1)
    for x in events(3):
        observe(state, x, table_scores(scores))
    assert state.snapshot() == [[2]]
    assert state.average(0, 0) == 1.0 and state.average(0, 1) == 1.0


def test_tie_evicts_oldest():
    # step 2 weights are 1/3 and 2/3, so avg(0) = (1 + 1/3)/2 = avg(1) = 2/3
    scores = {(1, 0): 1.0, (2, 0): 1.0, (2, 1): 2.0}
    state = OnlineSelection(eta=2, n_heads=1)
    for x in events(3):
        observe(state, x, table_scores(scores))
    assert state.average(0, 0) == state.average(0, 1)
    assert state.snapshot() == [[1, 2]]


def test_all_events_retained_up_to_eta():
    state = OnlineSelection(eta=5, n_heads=2)
    for i, x in enumerate(events(5)):
        observe(state, x, lambda m, e, past: np.ones(len(past)))
        assert state.snapshot() == [list(range(i + 1))] * 2


def test_out_of_order_rejected():
    state = OnlineSelection(eta=2, n_heads=1)
    observe(state, CongestionEvent(0.5, 0), None)
    with pytest.raises(ValueError):
        observe(state, CongestionEvent(0.5, 0), lambda m, e, p: [1.0])


def test_eta_must_be_positive():
    with pytest.raises(ValueError):
        OnlineSelection(eta=0, n_heads=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 25), st.integers(0, 10_000))
def test_selection_invariants(eta, n, seed):
    rng = np.random.default_rng(seed)
    scores = {(i, j): float(rng.uniform(0.1, 5.0)) for i in range(n) for j in range(i)}
    state = OnlineSelection(eta=eta, n_heads=1)
    want = replay(scores, n, eta)
    per_event = []
    for i, x in enumerate(events(n)):
        before = state.score_evals
        observe(state, x, table_scores(scores))
        per_event.append(state.score_evals - before)
        kept = state.snapshot()[0]
        assert kept == want[i]
        assert len(kept) <= eta
        assert all(j <= i for j in kept)
        for j in state.sums[0]:
            assert state.average(0, j) == state.sums[0][j] / state.counts[0][j]
    assert max(per_event) <= eta


def test_score_cost_independent_of_history_length():
    p = toy_params(n_heads=3)
    for n in (20, 80):
        s = seq(np.linspace(0.01, 0.99, n))
        state, _ = run_selection(p, s, eta=4)
        # after warm-up each event costs exactly eta * M score evaluations
        assert state.score_evals == 3 * (sum(range(4)) + 4 * (n - 4))


def test_large_eta_equals_full_model():
    p = toy_params(n_sensors=2, n_heads=2, value_dim=2, seed=3)
    s = seq([0.05, 0.2, 0.22, 0.5, 0.61, 0.9], sensors=[0, 1, 1, 0, 1, 0])
    state, _ = run_selection(p, s, eta=len(s))
    for t in (0.91, 0.95, 0.999):
        for k in range(2):
            assert online_intensity(p, state, t, k) == intensity(p, t, k, s)
    assert online_log_likelihood(p, s, eta=len(s)) == pytest.approx(log_likelihood(p, s), rel=1e-14)


def test_empty_state_is_background():
    p = toy_params(mu0=0.4)
    state = OnlineSelection(eta=3, n_heads=1)
    assert online_intensity(p, state, 0.2, 0) == pytest.approx(0.4)


def test_query_before_last_event_rejected():
    p = toy_params()
    state, _ = run_selection(p, seq([0.3]), eta=2)
    with pytest.raises(ValueError):
        online_intensity(p, state, 0.2, 0)


def test_selection_is_deterministic():
    p = toy_params(n_heads=2, seed=5)
    s = seq(np.sort(np.random.default_rng(0).uniform(0, 1, 30)))
    assert run_selection(p, s, 5)[1] == run_selection(p, s, 5)[1]


def test_half_history_online_error_report():
    from stpp.simulate import gen_hawkes

    p = toy_params(n_heads=2, value_dim=2, seed=1, mu0=10.0)
    p.arrays["out.b"] = np.array(1.0)
    data = [r.sequence for r in gen_hawkes(T=1.0, n=10, seed=2)]
    rel = []
    for s in data:
        eta = max(1, len(s) // 2)
        for i in range(1, len(s)):
            prefix = s.prefix(i)
            state, _ = run_selection(p, prefix, eta)
            t = float(s.times[i])
            full = intensity(p, t, 0, s)
            rel.append(abs(online_intensity(p, state, t, 0) - full) / full)
    print(f"online vs full, eta = n/2: mean relative gap {np.mean(rel):.3e} over {len(rel)} events")
    assert np.all(np.isfinite(rel))
