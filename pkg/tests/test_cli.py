import csv
import json

import pytest

from stpp.cli import read_config, run
from stpp.events import MIN_INCIDENT_HOURS, load_dataset

NET = {
    "segments": [{"id": "a", "length_m": 500.0, "to": ["c"]}, {"id": "b", "length_m": 400.0, "to": ["c"]},
                 {"id": "c", "length_m": 800.0, "to": []}],
    "sensors": [{"id": 0, "segment": "a", "offset_m": 100.0}, {"id": 1, "segment": "b", "offset_m": 200.0},
                {"id": 2, "segment": "c", "offset_m": 100.0}, {"id": 3, "segment": "c", "offset_m": 600.0}],
}
SMALL = ["--epochs", "1", "--batch", "8", "--heads", "2", "--value-dim", "2", "--hidden", "4", "--lr", "1e-2"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "net.json").write_text(json.dumps(NET))
    (d / "w.csv").write_text("bin_start_h,segment,weight\n0,a,1\n0,b,2\n0,c,3\n")
    net = ["--network", str(d / "net.json"), "--weights", str(d / "w.csv")]
    assert run(["simulate", "--kind", "hawkes", "--n", "12", "--seed", "7", "-o", str(d / "h.jsonl")]) == 0
    assert run(["fit", "--data", str(d / "h.jsonl"), "--temporal-only", *SMALL, "-o", str(d / "t.ckpt")]) == 0
    assert run(["simulate", "--kind", "network-hawkes", "--mu0", "3", "--alpha", "0.5", "--n", "8",
                "--seed", "2", *net, "-o", str(d / "nh.jsonl")]) == 0
    assert run(["fit", "--data", str(d / "nh.jsonl"), *net, *SMALL, "-o", str(d / "s.ckpt")]) == 0
    return d, net


def test_simulate_example_count(tmp_path):
    out = tmp_path / "data.jsonl"
    assert run(["simulate", "--kind", "hawkes", "--mu", "10", "--alpha", "1", "--beta", "1", "--n", "500",
                "--seed", "7", "-o", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 500


def test_simulate_from_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"kind": "self-correcting", "n": 4, "seed": 1}))
    assert run(["simulate", "--spec", str(spec), "-o", str(tmp_path / "o.jsonl")]) == 0
    assert len(load_dataset(tmp_path / "o.jsonl")) == 4


def test_simulate_fitted_model(ws, tmp_path):
    d, net = ws
    out = tmp_path / "fm.jsonl"
    assert run(["simulate", "--kind", "fitted-model", "--ckpt", str(d / "s.ckpt"), *net, "--n", "3",
                "-o", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_fit_writes_checkpoint_and_trace(ws):
    d, _ = ws
    assert (d / "t.ckpt").exists()
    trace = rows(f"{d / 't.ckpt'}.trace.csv")
    assert trace[0] == ["epoch", "avg_loglik"] and len(trace) == 2


def test_evaluate_report(ws, tmp_path):
    d, net = ws
    out = tmp_path / "r.json"
    assert run(["evaluate", "--data", str(d / "nh.jsonl"), "--ckpt", str(d / "s.ckpt"), *net, "-o", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert {"accuracy", "time_mae", "avg_loglik"} <= set(rep)


def test_predict_rows(ws, tmp_path):
    d, _ = ws
    n_seq = len(load_dataset(d / "h.jsonl"))
    out = tmp_path / "p.csv"
    assert run(["predict", "--data", str(d / "h.jsonl"), "--ckpt", str(d / "t.ckpt"), "-o", str(out)]) == 0
    assert rows(out)[0] == ["seq", "n", "t_hat", "s_hat"] and len(rows(out)) == n_seq + 1
    total = sum(len(s) + 1 for s in load_dataset(d / "h.jsonl"))
    assert run(["predict", "--data", str(d / "h.jsonl"), "--ckpt", str(d / "t.ckpt"), "--all-prefixes",
                "-o", str(out)]) == 0
    assert len(rows(out)) == total + 1


def test_select_events(ws, tmp_path):
    d, _ = ws
    out = tmp_path / "sel.jsonl"
    assert run(["select-events", "--data", str(d / "h.jsonl"), "--ckpt", str(d / "t.ckpt"), "--eta", "3",
                "-o", str(out)]) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(recs) == sum(len(s) for s in load_dataset(d / "h.jsonl"))
    assert all(len(r["retained"][0]) <= 3 for r in recs)


def test_export_intensity(ws, tmp_path):
    d, net = ws
    out = tmp_path / "i.csv"
    assert run(["export-intensity", "--data", str(d / "nh.jsonl"), "--ckpt", str(d / "s.ckpt"), *net,
                "--grid", "25", "-o", str(out)]) == 0
    r = rows(out)
    assert r[0] == ["t", "sensor", "mu0", "mu1", "lambda_prime", "lambda_star"]
    assert len(r) == 25 * 4 + 1
    for row in r[1:]:
        mu0, mu1, lp, lam = map(float, row[2:])
        assert lam == pytest.approx(mu0 + mu1 + lp, rel=1e-12)
    assert run(["export-intensity", "--data", str(d / "nh.jsonl"), "--ckpt", str(d / "s.ckpt"), *net,
                "--seq", "99"]) == 2


def test_export_scores_lower_triangle(ws, tmp_path):
    d, _ = ws
    out = tmp_path / "sc.csv"
    assert run(["export-scores", "--data", str(d / "h.jsonl"), "--ckpt", str(d / "t.ckpt"), "-o", str(out)]) == 0
    body = rows(out)[1:]
    for s, seq in enumerate(load_dataset(d / "h.jsonl")):
        mine = [r for r in body if int(r[0]) == s]
        n = len(seq)
        assert len(mine) == n * (n - 1) // 2
        assert all(int(j) < int(i) for _, i, j, _ in mine)


def test_export_covariance(ws, tmp_path):
    d, net = ws
    out = tmp_path / "cov.csv"
    assert run(["export-covariance", *net, "-o", str(out)]) == 0
    r = rows(out)
    assert len(r) == 1 + 16
    val = {(int(a), int(b)): float(v) for _, a, b, v in r[1:]}
    assert val[(0, 1)] == 0.0 and val[(0, 2)] > 0.0


def test_fit_hawkes(ws, tmp_path):
    d, _ = ws
    out = tmp_path / "hk.json"
    assert run(["fit-hawkes", "--data", str(d / "h.jsonl"), "--test", str(d / "h.jsonl"), "--starts", "1",
                "-o", str(out)]) == 0
    assert {"mu", "alpha", "beta", "loglik", "test_avg_loglik"} <= set(json.loads(out.read_text()))


def test_split(ws, tmp_path):
    d, _ = ws
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(["split", "--data", str(d / "h.jsonl"), "--ratio", "0.75", "-o", str(a), "--test-output", str(b)]) == 0
    assert len(load_dataset(a)) == 9 and len(load_dataset(b)) == 3


def test_extract_with_incidents(ws, tmp_path):
    d, _ = ws
    counts = tmp_path / "c.csv"
    lines = ["sensor,bin_start_min,count"]
    lines += [f"0,{5 * i},{c}" for i, c in enumerate([1, 1, 9, 9, 1, 1])]
    lines += [f"2,{5 * i},{c}" for i, c in enumerate([2, 2, 2, 2, 2, 20])]
    counts.write_text("\n".join(lines) + "\n")
    inc = tmp_path / "inc.jsonl"
    inc.write_text(json.dumps({"t": 0.2, "segment": "c", "offset_m": 50.0, "z": 1.0}) + "\n"
                   + json.dumps({"t": 0.1, "segment": "a", "offset_m": 5.0, "z": MIN_INCIDENT_HOURS / 2}) + "\n")
    out = tmp_path / "x.jsonl"
    assert run(["extract", "--counts", str(counts), "--incidents", str(inc), "--threshold", "0=5",
                "--threshold", "2=10", "-o", str(out)]) == 0
    (s,) = load_dataset(out)
    assert [(round(e.t, 9), e.sensor) for e in s.congestion] == [(round(10 / 60, 9), 0), (round(25 / 60, 9), 2)]
    assert len(s.incidents) == 1 and s.incidents[0].location.segment == "c"
    inc.write_text("{not json}\n")
    assert run(["extract", "--counts", str(counts), "--incidents", str(inc), "-o", str(out)]) == 2


# config and errors -------------------------------------------------------------

def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nn = 3\nseed = 5\nkind = self-correcting\n")
    assert read_config(cfg) == {"n": "3", "seed": "5", "kind": "self-correcting"}
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(["simulate", "--config", str(cfg), "-o", str(a)]) == 0
    assert len(load_dataset(a)) == 3
    assert run(["simulate", "--config", str(cfg), "--n", "2", "-o", str(b)]) == 0
    assert len(load_dataset(b)) == 2
    c = tmp_path / "c.jsonl"
    assert run(["simulate", "--kind", "self-correcting", "--n", "3", "--seed", "5", "-o", str(c)]) == 0
    assert a.read_bytes() == c.read_bytes()


@pytest.mark.parametrize("text", ["bogus = 1\n", "n = many\n", "kind = poisson\n", "no separator\n"])
def test_bad_config(tmp_path, capsys, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run(["simulate", "--config", str(cfg), "-o", str(tmp_path / "o.jsonl")]) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "error" in err


def test_unknown_flag(capsys):
    assert run(["simulate", "--frobnicate"]) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "--frobnicate" in err


def test_no_subcommand(capsys):
    assert run([]) == 2
    assert capsys.readouterr().err.count("\n") == 1


def test_missing_file(tmp_path, capsys):
    assert run(["evaluate", "--data", str(tmp_path / "nope.jsonl"), "--ckpt", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "file not found" in err


def test_module_invariant_violation(ws, tmp_path, capsys):
    d, net = ws
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"T": 1.0, "congestion": [{"t": 0.5, "sensor": 0}, {"t": 0.2, "sensor": 0}],
                               "incidents": []}) + "\n")
    assert run(["evaluate", "--data", str(bad), "--ckpt", str(d / "t.ckpt")]) != 0
    err = capsys.readouterr().err
    assert err.count("\n") == 1


def test_repeated_runs_are_byte_identical(ws, tmp_path):
    d, _ = ws
    outs = []
    for k in range(2):
        ck = tmp_path / f"ck{k}"
        p = tmp_path / f"p{k}.csv"
        assert run(["fit", "--data", str(d / "h.jsonl"), "--temporal-only", *SMALL, "--seed", "3", "-o", str(ck)]) == 0
        assert run(["predict", "--data", str(d / "h.jsonl"), "--ckpt", str(ck), "-o", str(p)]) == 0
        outs.append((ck.read_bytes(), p.read_bytes()))
    assert outs[0] == outs[1]
