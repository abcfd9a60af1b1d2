"""Command-line entry point: ``stpp <subcommand> [options]``.

Any long option can also come from ``--config FILE`` (``key = value`` lines,
``#`` comments, keys spelled like the option without leading dashes). Options
given on the command line override the file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import batch_normalize, batch_scores, score_features
from .estimators import APPEstimator
from .events import (
    MIN_INCIDENT_HOURS,
    IncidentEvent,
    extract_sequence,
    load_counts,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .intensity import ModelParams, intensity_trace, likelihood_plan, predict_many
from .network import NetworkLocation, SpatialIndex, TailupParams, load_network, load_weights, renormalize_weights
from .online import run_selection
from .simulate import (
    GENERATORS,
    DEFAULT_CAP,
    GeneratorSpec,
    generate,
)
from .train import evaluate, fit_hawkes_mle, hawkes_loglik

log = logging.getLogger("stpp")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _fmt(x):
    return repr(float(x))


def _out(path):
    return open(path, "w", newline="") if path and path != "-" else _Stdout()


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()

    def write(self, s):
        sys.stdout.write(s)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise CliError(f"missing required option --{name.replace('_', '-')}")
        value = getattr(args, name)
        if name in {"data", "network", "weights", "ckpt", "counts", "spec", "incidents"} and not Path(value).exists():
            raise CliError(f"file not found: {value}")


def _network_context(args):
    if not getattr(args, "network", None):
        return None, None
    _require(args, "network", "weights")
    net = load_network(args.network)
    weights = renormalize_weights(net, load_weights(args.weights, getattr(args, "bin_hours", None)))
    return net, weights


def _load_model(args):
    _require(args, "ckpt")
    arrays, config = ad.load_checkpoint(args.ckpt)
    params = ModelParams.from_checkpoint(arrays, config)
    net, weights = _network_context(args)
    ctx = SpatialIndex(net, weights) if net is not None else None
    if ctx is None and (not params.config.temporal_only):
        raise CliError("spatial checkpoint needs --network and --weights")
    return params, ctx


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


# subcommands ------------------------------------------------------------------

def cmd_simulate(args):
    _require(args, "output")
    if args.spec:
        _require(args, "spec")
        payload = json.loads(Path(args.spec).read_text())
        spec = GeneratorSpec(**payload)
    else:
        params = {}
        if args.kind == "hawkes":
            params = {"mu": args.mu, "alpha": args.alpha, "beta": args.beta}
        elif args.kind == "self-correcting":
            params = {"mu": args.mu, "alpha": args.alpha}
        elif args.kind == "network-hawkes":
            params = {"alpha": args.alpha, "beta_time": args.beta}
        spec = GeneratorSpec(args.kind, params, args.T, args.n, args.seed, args.cap)
    context = {}
    if spec.kind == "network-hawkes":
        net, weights = _network_context(args)
        if net is None:
            raise CliError("network-hawkes needs --network and --weights")
        mu0 = _floats(args.mu0)
        context = {
            "index": SpatialIndex(net, weights),
            "tailup": TailupParams(args.tailup_beta, args.tailup_sigma),
            "mu0": mu0 * net.n_sensors if len(mu0) == 1 else mu0,
        }
    elif spec.kind == "fitted-model":
        params, ctx = _load_model(args)
        context = {"params": params, "ctx": ctx}
    results = generate(spec, **context)
    truncated = [i for i, r in enumerate(results) if r.truncated]
    if truncated:
        log.warning("%d sequence(s) hit the %d-event cap: %s", len(truncated), spec.cap, truncated[:20])
    keep = [r.sequence for r in results if not (args.drop_truncated and r.truncated)]
    save_dataset(keep, args.output)
    return 0


def _estimator_from_args(args, net, weights):
    return APPEstimator(
        network=net, weights=weights, n_heads=args.heads, value_dim=args.value_dim, hidden=args.hidden,
        temporal_only=args.temporal_only or net is None, epochs=args.epochs, batch=args.batch, lr=args.lr,
        n_sub=args.n_sub, eta=args.eta, clip=args.clip, background_bins=args.background_bins,
        time_scale=args.time_scale, seed=args.seed, threads=args.threads)


def cmd_fit(args):
    _require(args, "data", "output")
    net, weights = _network_context(args)
    seqs = load_dataset(args.data, net)
    est = _estimator_from_args(args, net, weights)
    trace_path = args.trace or f"{args.output}.trace.csv"
    rows = []

    def on_epoch(epoch, params, avg):
        ad.save_checkpoint(args.output, params.arrays, params.config_dict())
        rows.append((epoch, avg))
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "avg_loglik"])
            w.writerows((e, _fmt(a)) for e, a in rows)
        log.info("epoch %d avg_loglik %.6f", epoch, avg)

    est.fit(seqs, on_epoch=on_epoch)
    return 0


def cmd_evaluate(args):
    _require(args, "data")
    params, ctx = _load_model(args)
    seqs = load_dataset(args.data, ctx.net if ctx else None)
    report = evaluate(params, seqs, ctx, args.n_sub, args.n_pred, args.normalize_density, args.eta)
    text = json.dumps({k: (None if isinstance(v, float) and np.isnan(v) else v)
                       for k, v in report.as_dict().items()}, sort_keys=True)
    with _out(args.output) as fh:
        fh.write(text + "\n")
    return 0


def cmd_predict(args):
    _require(args, "data")
    params, ctx = _load_model(args)
    seqs = load_dataset(args.data, ctx.net if ctx else None)
    keys, prefixes = [], []
    for i, seq in enumerate(seqs):
        ns = range(len(seq) + 1) if args.all_prefixes else [len(seq)]
        for n in ns:
            keys.append((i, n))
            prefixes.append(seq.prefix(n) if n < len(seq) else seq)
    preds = predict_many(params, prefixes, None, ctx, args.n_pred, args.normalize_density)
    with _out(args.output) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "n", "t_hat", "s_hat"])
        for (i, n), (t_hat, s_hat) in zip(keys, preds):
            w.writerow([i, n, _fmt(t_hat), s_hat])
    return 0


def cmd_select_events(args):
    _require(args, "data", "eta")
    params, ctx = _load_model(args)
    seqs = load_dataset(args.data, ctx.net if ctx else None)
    with _out(args.output) as fh:
        for i, seq in enumerate(seqs):
            _, snaps = run_selection(params, seq, args.eta, ctx)
            for step, snap in enumerate(snaps[1:], start=1):
                fh.write(json.dumps({"seq": i, "step": step, "retained": snap}, separators=(",", ":")) + "\n")
    return 0


def cmd_export_intensity(args):
    _require(args, "data")
    params, ctx = _load_model(args)
    seqs = load_dataset(args.data, ctx.net if ctx else None)
    if not 0 <= args.seq < len(seqs):
        raise CliError(f"--seq {args.seq} out of range (file has {len(seqs)} sequences)")
    seq = seqs[args.seq]
    grid = np.linspace(0.0, seq.T, args.grid, endpoint=False)
    with _out(args.output) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "sensor", "mu0", "mu1", "lambda_prime", "lambda_star"])
        for tr in intensity_trace(params, seq, grid, None, ctx):
            for j, t in enumerate(tr.times):
                w.writerow([_fmt(t), tr.sensor, _fmt(tr.mu0[j]), _fmt(tr.mu1[j]), _fmt(tr.lam_prime[j]),
                            _fmt(tr.lam[j])])
    return 0


def pairwise_scores(params, seq, ctx, head=0, normalized=True):
    """(i, j, score) for every j < i: head ``head``'s weight of event j when at event i."""
    cfg = params.config
    if not 0 <= head < cfg.n_heads:
        raise CliError(f"head {head} outside 0..{cfg.n_heads - 1}")
    plan = likelihood_plan(cfg, seq, ctx, n_sub=2)
    pairs = plan.pairs[head]
    keep = pairs.query < len(seq)
    q, e = pairs.query[keep], pairs.event[keep]
    alpha = None
    if not cfg.temporal_only:
        p = params.tailup
        alpha = p.beta * np.exp(-pairs.dist[keep] / p.sigma) * pairs.ratio[keep]
    raw = np.asarray(batch_scores(params.arrays, head, score_features(pairs.dt[keep], alpha, cfg.time_scale)))
    values = np.asarray(batch_normalize(raw, q, len(seq))) if normalized else raw
    return list(zip(q.tolist(), e.tolist(), values.tolist()))


def cmd_export_scores(args):
    _require(args, "data")
    params, ctx = _load_model(args)
    seqs = load_dataset(args.data, ctx.net if ctx else None)
    with _out(args.output) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "i", "j", "score"])
        for s, seq in enumerate(seqs):
            for i, j, v in pairwise_scores(params, seq, ctx, args.head, not args.raw):
                w.writerow([s, i, j, _fmt(v)])
    return 0


def cmd_export_covariance(args):
    net, weights = _network_context(args)
    if net is None:
        raise CliError("export-covariance needs --network and --weights")
    if args.ckpt:
        params, _ = _load_model(args)
        p = params.tailup
    else:
        p = TailupParams(args.tailup_beta, args.tailup_sigma)
    index = SpatialIndex(net, weights)
    with _out(args.output) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "row", "col", "value"])
        for b in weights.bins:
            c = index.correlation_matrix(b, p)
            for r in range(c.shape[0]):
                for k in range(c.shape[1]):
                    w.writerow([b, r, k, _fmt(c[r, k])])
    return 0


def cmd_fit_hawkes(args):
    _require(args, "data")
    seqs = load_dataset(args.data)
    res = fit_hawkes_mle(seqs, starts=args.starts, seed=args.seed)
    payload = {"mu": res.mu, "alpha": res.alpha, "beta": res.beta, "loglik": res.loglik}
    if args.test:
        payload["test_avg_loglik"] = float(np.mean(hawkes_loglik(load_dataset(args.test), res.mu, res.alpha,
                                                                 res.beta)))
    with _out(args.output) as fh:
        fh.write(json.dumps(payload, sort_keys=True) + "\n")
    return 0


def cmd_extract(args):
    _require(args, "counts", "output")
    series = load_counts(args.counts)
    thresholds = {}
    for item in args.threshold or []:
        k, _, v = item.partition("=")
        thresholds[int(k)] = float(v)
    end = max((s.start_minutes + len(s.counts) * s.bin_minutes) / 60.0 for s in series)
    incidents = _read_incidents(args.incidents) if args.incidents else ()
    seq = extract_sequence(series, args.T or end, thresholds, incidents, args.min_z)
    save_dataset([seq], args.output)
    return 0


def _read_incidents(path):
    """One incident per line: {"t": h, "segment": id, "offset_m": m, "z": h}."""
    _require(argparse.Namespace(incidents=path), "incidents")
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
            out.append(IncidentEvent(float(e["t"]), NetworkLocation(str(e["segment"]), float(e["offset_m"])),
                                     float(e["z"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"{path}:{n}: malformed incident ({exc})") from None
    return sorted(out, key=lambda y: y.t)


def cmd_split(args):
    _require(args, "data", "output", "test_output")
    train, test = split_dataset(load_dataset(args.data), args.ratio, args.seed)
    save_dataset(train, args.output)
    save_dataset(test, args.test_output)
    return 0


# parser -----------------------------------------------------------------------

def _common(p, model=False):
    p.add_argument("--config", help="key = value option file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.add_argument("--network")
    p.add_argument("--weights")
    p.add_argument("--bin-hours", type=float, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: $STPP_THREADS or 1)")
    if model:
        p.add_argument("--ckpt")
        p.add_argument("--data")
        p.add_argument("--n-sub", type=int, default=10)
        p.add_argument("--n-pred", type=int, default=200)
        p.add_argument("--eta", type=int, default=None)
        p.add_argument("--normalize-density", action="store_true")


def build_parser():
    parser = _Parser(prog="stpp", description="Attention-based spatio-temporal point processes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate synthetic sequences")
    _common(p)
    p.add_argument("--kind", choices=sorted(GENERATORS) + ["fitted-model"], default="hawkes")
    p.add_argument("--spec", help="JSON generator spec (kind, params, T, n, seed, cap)")
    p.add_argument("--mu", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--mu0", default="1.0", help="background rate(s), comma separated")
    p.add_argument("--tailup-beta", type=float, default=1.0)
    p.add_argument("--tailup-sigma", type=float, default=1000.0)
    p.add_argument("--ckpt")
    p.add_argument("--drop-truncated", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="train the model by maximum likelihood")
    _common(p, model=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--heads", type=int, default=3)
    p.add_argument("--value-dim", type=int, default=8)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--temporal-only", action="store_true")
    p.add_argument("--clip", type=float, default=10.0)
    p.add_argument("--background-bins", type=int, default=0)
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--trace", help="training trace CSV (default: <output>.trace.csv)")
    p.set_defaults(func=cmd_fit)

    for name, func, text in [
        ("evaluate", cmd_evaluate, "test log-likelihood, accuracy and time MAE"),
        ("predict", cmd_predict, "next-event time and sensor per prefix"),
        ("select-events", cmd_select_events, "online event-selection audit trail"),
        ("export-intensity", cmd_export_intensity, "intensity trace CSV"),
        ("export-scores", cmd_export_scores, "lower-triangular attention scores"),
    ]:
        p = sub.add_parser(name, help=text)
        _common(p, model=True)
        p.set_defaults(func=func)
        if name == "predict":
            p.add_argument("--all-prefixes", action="store_true")
        if name == "export-intensity":
            p.add_argument("--seq", type=int, default=0)
            p.add_argument("--grid", type=int, default=200)
        if name == "export-scores":
            p.add_argument("--head", type=int, default=0)
            p.add_argument("--raw", action="store_true", help="unnormalized scores")

    p = sub.add_parser("export-covariance", help="tail-up correlation between sensors per weight bin")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--tailup-beta", type=float, default=1.0)
    p.add_argument("--tailup-sigma", type=float, default=1000.0)
    p.set_defaults(func=cmd_export_covariance)

    p = sub.add_parser("fit-hawkes", help="exponential Hawkes baseline by maximum likelihood")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--starts", type=int, default=5)
    p.set_defaults(func=cmd_fit_hawkes)

    p = sub.add_parser("extract", help="congestion events from a count CSV")
    _common(p)
    p.add_argument("--counts")
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--threshold", action="append", help="per-sensor override SENSOR=VALUE")
    p.add_argument("--incidents", help="JSON-lines incidents (t, segment, offset_m, z)")
    p.add_argument("--min-z", type=float, default=MIN_INCIDENT_HOURS, help="drop incidents shorter than this (h)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("split", help="deterministic train/test split")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--test-output")
    p.set_defaults(func=cmd_split)
    return parser


def read_config(path):
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{n}: expected key = value")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _apply_config(subparser, path):
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, text in read_config(path).items():
        action = actions.get(key)
        if action is None or key in {"config", "help"}:
            raise CliError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            low = text.lower()
            if low not in {"true", "false", "1", "0", "yes", "no"}:
                raise CliError(f"config key {key!r} expects true/false")
            defaults[key] = low in {"true", "1", "yes"}
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in text.split(",")]
        else:
            try:
                defaults[key] = action.type(text) if action.type else text
            except ValueError:
                raise CliError(f"config key {key!r}: bad value {text!r}") from None
            if action.choices and defaults[key] not in action.choices:
                raise CliError(f"config key {key!r}: {text!r} not in {sorted(action.choices)}")
    subparser.set_defaults(**defaults)


def run(argv=None):
    """Parse ``argv`` and run the subcommand; returns the exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise CliError("no subcommand given (try --help)")
        if getattr(args, "config", None):
            if not Path(args.config).exists():
                raise CliError(f"file not found: {args.config}")
            sub = parser._subparsers._group_actions[0].choices[args.command]
            _apply_config(sub, args.config)
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except CliError as exc:
        print(f"stpp: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"stpp: error: {msg}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
