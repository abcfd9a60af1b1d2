"""Shared fixtures-as-functions and independent oracles for the test suite."""
from __future__ import annotations

import math

import numpy as np
from hypothesis import strategies as st

from stpp.events import EventSequence
from stpp.intensity import ModelConfig, init_params
from stpp.network import NetworkLocation, SegmentWeights, build_network

# Confluence layout drawn for the weighting example: 2,3 -> 8 -> 9; 4,5 -> 1;
# 1 forks into 6,7; 6 and 9 merge into 11; 7 -> 10. u sits on 5, v on 11, r on 3.
FIG6 = {
    "segments": [
        {"id": "w1", "length_m": 400.0, "to": ["w6", "w7"]},
        {"id": "w2", "length_m": 300.0, "to": ["w8"]},
        {"id": "w3", "length_m": 350.0, "to": ["w8"]},
        {"id": "w4", "length_m": 500.0, "to": ["w1"]},
        {"id": "w5", "length_m": 450.0, "to": ["w1"]},
        {"id": "w6", "length_m": 600.0, "to": ["w11"]},
        {"id": "w7", "length_m": 250.0, "to": ["w10"]},
        {"id": "w8", "length_m": 200.0, "to": ["w9"]},
        {"id": "w9", "length_m": 700.0, "to": ["w11"]},
        {"id": "w10", "length_m": 300.0, "to": []},
        {"id": "w11", "length_m": 800.0, "to": []},
    ],
    "sensors": [
        {"id": 0, "segment": "w5", "offset_m": 150.0},
        {"id": 1, "segment": "w11", "offset_m": 100.0},
        {"id": 2, "segment": "w3", "offset_m": 50.0},
    ],
}
FIG6_WEIGHTS = {"w2": 1.0, "w3": 2.0, "w8": 3.0, "w9": 3.0, "w4": 2.0, "w5": 1.0, "w1": 3.0,
                "w6": 1.0, "w7": 2.0, "w10": 2.0, "w11": 4.0}


def fig6():
    return build_network(FIG6)


def chain_network(lengths=(5.0, 10.0), sensors=((1, 4.0),)):
    ids = [f"L{i}" for i in range(len(lengths))]
    segs = [{"id": s, "length_m": float(n), "to": [ids[i + 1]] if i + 1 < len(ids) else []}
            for i, (s, n) in enumerate(zip(ids, lengths))]
    sens = [{"id": k, "segment": ids[i], "offset_m": float(o)} for k, (i, o) in enumerate(sensors)]
    return build_network({"segments": segs, "sensors": sens})


def unit_weights(net, bins=(0,), bin_hours=2.0):
    return SegmentWeights.constant({s: 1.0 for s in net.segments}, bins, bin_hours)


def seq(times, T=1.0, sensors=None):
    return EventSequence.from_times(times, T, sensors)


def toy_params(n_sensors=1, temporal_only=True, n_heads=1, value_dim=1, hidden=4, seed=0, mu0=0.5, **kw):
    cfg = ModelConfig(n_sensors=n_sensors, n_heads=n_heads, value_dim=value_dim, hidden=hidden,
                      temporal_only=temporal_only, **kw)
    return init_params(cfg, seed=seed, mu0=mu0)


def constant_params(lam, n_sensors=1):
    """Model whose intensity is exactly ``lam`` everywhere (self-excitation switched off)."""
    p = toy_params(n_sensors=n_sensors, mu0=lam)
    p.arrays["out.W"] = np.zeros_like(p.arrays["out.W"])
    p.arrays["out.b"] = np.array(-800.0)  # softplus underflows to 0
    return p


# independent oracles ----------------------------------------------------------

def replay(scores, n, eta):
    """Brute-force replay: keep every folded value and recompute averages from scratch."""
    retained, folded, history = [], {}, []
    for i in range(n):
        if retained:
            raw = np.array([scores[(i, j)] for j in retained])
            for j, v in zip(retained, raw / raw.sum()):
                folded.setdefault(j, []).append(v)
        cand = list(retained)
        retained = retained + [i]
        if i + 1 > eta:
            avgs = [np.mean(folded[j]) for j in cand]
            retained.remove(cand[int(np.argmin(avgs))])
        history.append(list(retained))
    return history


def enumerate_distance(spec, u, v):
    """Brute-force shortest downstream distance u -> v by simple-path enumeration."""
    segs = {s["id"]: s for s in spec["segments"]}
    best = math.inf
    if u.segment == v.segment and u.offset <= v.offset:
        best = v.offset - u.offset
    head = segs[u.segment]["length_m"] - u.offset

    def walk(node, acc, seen):
        nonlocal best
        for nxt in segs[node]["to"]:
            if nxt == v.segment:
                best = min(best, acc + v.offset)
            if nxt not in seen and nxt != v.segment:
                walk(nxt, acc + segs[nxt]["length_m"], seen | {nxt})

    walk(u.segment, head, {u.segment})
    return best


@st.composite
def networks(draw, max_segments=6, dag=False, max_sensors=3):
    n = draw(st.integers(1, max_segments))
    ids = [f"s{i}" for i in range(n)]
    lengths = [float(draw(st.integers(1, 20))) for _ in range(n)]
    segs = []
    for i in range(n):
        cand = [j for j in range(n) if j != i and (not dag or j > i)]
        to = draw(st.lists(st.sampled_from(cand), unique=True, max_size=2)) if cand else []
        segs.append({"id": ids[i], "length_m": lengths[i], "to": [ids[j] for j in sorted(to)]})
    k = draw(st.integers(1, max_sensors))
    sensors = []
    for s in range(k):
        i = draw(st.integers(0, n - 1))
        off = draw(st.floats(0.0, lengths[i], allow_nan=False))
        sensors.append({"id": s, "segment": ids[i], "offset_m": off})
    return {"segments": segs, "sensors": sensors}


def additive_weights(net, rng):
    """Exact additive weights: sources random, every junction splits its inflow at random."""
    from graphlib import TopologicalSorter

    junctions = net.junctions
    # junction j needs the weights of its inbound segments, which are outbound of earlier junctions
    start_of = {s: j for j, (_, outbound) in enumerate(junctions) for s in outbound}
    deps = {j: {start_of[s] for s in inbound if s in start_of} for j, (inbound, _) in enumerate(junctions)}
    order = list(TopologicalSorter(deps).static_order())
    w = {s: float(rng.uniform(0.5, 2.0)) for s in net.segments if s not in start_of}
    for j in order:
        inbound, outbound = junctions[j]
        total = sum(w[s] for s in inbound)
        share = rng.dirichlet(np.ones(len(outbound)))
        for s, f in zip(outbound, share):
            w[s] = total * float(f)
    return SegmentWeights.constant(w)


def random_locations(net, rng, n):
    ids = list(net.segments)
    out = []
    for _ in range(n):
        s = ids[rng.integers(len(ids))]
        out.append(NetworkLocation(s, float(rng.uniform(0.0, net.segments[s].length))))
    return out
