"""Command line: trace generation, simulation, mix rounds, exposure and bandwidth reports.

Exit codes: 0 success, 1 usage error, 2 bad input (missing or malformed
file, invalid parameter), 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import Counter
from typing import Sequence

import numpy as np

from .delta import BATCH_MAGIC, decode_batch
from .errors import ConfigError, InvariantViolation, LedgerMismatch, PopDNSError
from .exposure import ExposureParams, Scheme, exposure_closed_form, exposure_monte_carlo
from .mixnet import make_network, run_voting_round
from .poplist import build_list, parse_snapshot, serialize_snapshot
from .sim import SimConfig, gen_trace, load_trace, run_churn, run_sim, write_trace
from .sim.engine import synthetic_universe
from .sim.upstream import ChurnModel, Upstream
from .voting import Ballot, RoundConfig, bootstrap_weights

log = logging.getLogger("popdns")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config files ------------------------------------------------------------

def _convert(name: str, kind: type, text: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            parts = text.replace(",", " ").split()
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def read_config(path: str) -> dict:
    """Flat ``key = value`` file over SimConfig field names; ``#`` starts a comment."""
    types = SimConfig.field_types()
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
            out[key] = _convert(key, types[key], value)
    return out


def _sim_flags(p: argparse.ArgumentParser) -> None:
    for name, kind in SimConfig.field_types().items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=name, default=None,
                           type=lambda s, n=name: _convert(n, bool, s), metavar="BOOL")
        elif kind is tuple:
            p.add_argument(flag, dest=name, default=None,
                           type=lambda s, n=name: _convert(n, tuple, s), metavar="LIST")
        else:
            p.add_argument(flag, dest=name, default=None, type=kind)


def _sim_config(args) -> SimConfig:
    values = read_config(args.config) if args.config else {}
    for name in SimConfig.field_types():
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    return SimConfig(**values)


# -- output ------------------------------------------------------------------

def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_rows(path: str | None, header: Sequence[str], rows, echo: bool = False) -> None:
    rows = [[_fmt(v) for v in row] for row in rows]
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    if echo or not path:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


# -- subcommands -------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    trace = gen_trace(args.clients, args.hours * 3600, args.rate, args.zipf_s, args.domains,
                      args.seed, aaaa_fraction=args.aaaa_fraction)
    write_trace(trace, args.out)
    log.info("wrote %d events over %d records to %s", len(trace), len(trace.keys), args.out)
    return EXIT_OK


def cmd_run_sim(args) -> int:
    config = _sim_config(args)
    if args.trace:
        trace = load_trace(args.trace)
    else:
        trace = gen_trace(args.clients, args.hours * 3600, args.rate, args.zipf_s, args.domains,
                          config.seed)
    report = run_sim(config, trace)
    report.write(args.out)
    if report.ledger_violations:
        log.error("%d ledger violations during the run", report.ledger_violations)
        return EXIT_INVARIANT
    print(f"mean_hit_ratio,{report.mean_hit_ratio!r}")
    print(f"bytes_per_hour,{report.bytes_per_hour!r}")
    return EXIT_OK


def cmd_mix_round(args) -> int:
    rng = np.random.default_rng(args.seed)
    registry, keypairs = make_network(args.clients, rng)
    universe = synthetic_universe(args.universe)
    ballots = {}
    for c in registry.clients:
        n = int(rng.integers(0, args.votes + 1))
        picks = rng.choice(len(universe), size=min(n, len(universe)), replace=False)
        ballots[c] = Ballot(tuple(universe[i] for i in sorted(picks.tolist())))
    votes, ledger = run_voting_round(ballots, registry, args.rounds, rng, keypairs, v_max=args.v_max)
    sent = Counter(v for b in ballots.values() for v in b)
    got = Counter(votes)
    if got != sent or not ledger.conserved():
        raise InvariantViolation("mix round did not preserve the submitted votes")
    _write_rows(os.path.join(args.out, "votes.csv"), ["record", "qtype", "count"],
                sorted(((str(k.name), k.qtype.name, n) for k, n in got.items())))
    _write_rows(os.path.join(args.out, "ledger.csv"), ["round", "node", "in", "out", "flagged"],
                [(r, node, n, ledger.out_count[(node, r)], ledger.flagged.get((node, r), 0))
                 for (node, r), n in sorted(ledger.in_count.items(), key=lambda kv: (kv[0][1], kv[0][0]))])
    print(f"votes,{len(votes)}")
    return EXIT_OK


def _report_inputs(path: str) -> dict:
    summary = os.path.join(path, "summary.csv") if os.path.isdir(path) else path
    try:
        with open(summary, newline="", encoding="utf-8") as fh:
            rows = {r["metric"]: r["value"] for r in csv.DictReader(fh)}
    except OSError as exc:
        raise ConfigError(f"cannot read report {summary}: {exc.strerror}") from None
    try:
        return {"h": float(rows["h"]), "voters": max(1, round(float(rows["V"]))),
                "users": int(rows["U"]), "q_v": float(rows["q_v"]), "rounds": int(rows["rounds"])}
    except (KeyError, ValueError):
        raise ConfigError(f"{summary} is not a simulation summary") from None


def cmd_exposure(args) -> int:
    base = {"users": args.users, "voters": args.voters, "h": args.h, "rounds": args.rounds,
            "q_v": args.q_v}
    if args.from_report:
        base.update(_report_inputs(args.from_report))
    if args.voters is None and not args.from_report:
        base["voters"] = base["users"]
    schemes = [Scheme(s) for s in args.scheme] if args.scheme else list(Scheme)
    rows = []
    for scheme in schemes:
        for c in args.c:
            p = ExposureParams(c=c, scheme=scheme, **base)
            if args.trials:
                est, err = exposure_monte_carlo(p, args.trials, args.seed)
            else:
                est, err = exposure_closed_form(p), 0.0
            rows.append((scheme.value, c, est, err))
    out = os.path.join(args.out, "exposure.csv") if args.out else None
    _write_rows(out, ["scheme", "c", "exposure", "stderr"], rows, echo=True)
    return EXIT_OK


def cmd_bandwidth(args) -> int:
    model = ChurnModel(k=args.churn_k, p_change=args.p_change, seed=args.seed)
    rows, literal_rows = [], []
    for ttl_min in args.ttl_min:
        r = run_churn(args.n_popular, args.hours, ttl_min, model, args.seed,
                      literal_baseline=args.compare_literal)
        rows.append((ttl_min, args.n_popular, r.bytes_per_hour))
        literal_rows.append((ttl_min, args.n_popular, r.bytes_per_hour, r.literal_bytes_per_hour))
    out = os.path.join(args.out, "bandwidth.csv") if args.out else None
    _write_rows(out, ["ttl_min", "n_popular", "bytes_per_hour"], rows, echo=True)
    if args.compare_literal and args.out:
        _write_rows(os.path.join(args.out, "encoding.csv"),
                    ["ttl_min", "n_popular", "bytes_per_hour", "literal_bytes_per_hour"],
                    literal_rows)
    return EXIT_OK


def cmd_snapshot_encode(args) -> int:
    trace = load_trace(args.trace)
    if not len(trace):
        raise ConfigError("trace is empty")
    day = trace.slice_time(int(trace.t_ms[0]), int(trace.t_ms[0]) + args.bootstrap * 1000)
    table = bootstrap_weights([trace.keys[k] for k in trace.key_id[day].tolist()],
                              RoundConfig(n_popular=args.n_popular))
    upstream = Upstream(trace.keys, ChurnModel(seed=args.seed))
    ranked = [(k, *upstream.resolve(k)) for k in table.top(args.n_popular)]
    plist = build_list(ranked, upstream.resolve, args.n_popular)
    data = serialize_snapshot(plist)
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"entries,{len(plist)}")
    print(f"pool,{len(plist.pool)}")
    print(f"bytes,{len(data)}")
    return EXIT_OK


def cmd_snapshot_decode(args) -> int:
    try:
        with open(args.file, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.file}: {exc.strerror}") from None
    if data[:4] == BATCH_MAGIC:
        batch = decode_batch(data)
        rows = [(i, type(d).__name__, repr(d)) for i, d in enumerate(batch.deltas)]
        print(f"# batch {batch.from_version} -> {batch.to_version}, {len(batch)} deltas")
        _write_rows(args.out, ["index", "kind", "delta"], rows)
        return EXIT_OK
    plist = parse_snapshot(data)
    rows = [(e.order, str(e.key.name), e.key.qtype.name, str(plist.pool[e.answer]), e.ttl,
             int(e.is_cname_support)) for e in plist]
    print(f"# snapshot version {plist.version}, {len(plist)} entries, pool {len(plist.pool)}")
    _write_rows(args.out, ["order", "name", "qtype", "answer", "ttl", "cname_support"], rows)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _trace_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clients", type=int, default=2000)
    p.add_argument("--hours", type=float, default=48)
    p.add_argument("--rate", type=float, default=40.0, help="queries per client per hour")
    p.add_argument("--zipf-s", type=float, default=1.0)
    p.add_argument("--domains", type=int, default=1_000_000)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="popdns", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-trace", help="write a synthetic Zipf query trace")
    _trace_flags(p)
    p.add_argument("--aaaa-fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("run-sim", help="simulate the service over a trace")
    p.add_argument("--config", help="key = value file of simulation settings")
    p.add_argument("--trace", help="trace CSV (default: synthesize one)")
    _trace_flags(p)
    _sim_flags(p)
    p.add_argument("--out", default="sim-out", help="output directory")
    p.set_defaults(func=cmd_run_sim)

    p = sub.add_parser("mix-round", help="run one voting mix round over random ballots")
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--votes", type=int, default=10, help="max votes per client")
    p.add_argument("--v-max", type=int, default=10)
    p.add_argument("--universe", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="mix-out")
    p.set_defaults(func=cmd_mix_round)

    p = sub.add_parser("exposure", help="exposure rate per scheme and collusion rate")
    p.add_argument("--scheme", action="append", choices=[s.value for s in Scheme])
    p.add_argument("--c", type=_floats, default=[i / 10 for i in range(11)],
                   help="comma separated collusion rates")
    p.add_argument("--users", type=int, default=10_000)
    p.add_argument("--voters", type=int, default=None, help="default: --users")
    p.add_argument("--h", type=float, default=0.944)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--q-v", type=float, default=0.3)
    p.add_argument("--from-report", help="simulation output dir supplying h, V, U, q_v")
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo trials (0: closed form)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory for exposure.csv")
    p.set_defaults(func=cmd_exposure)

    p = sub.add_parser("bandwidth", help="update bandwidth from upstream churn per ttl_min")
    p.add_argument("--ttl-min", type=_ints, default=[30, 60, 120, 300])
    p.add_argument("--n-popular", type=int, default=10_000)
    p.add_argument("--hours", type=float, default=24.0)
    p.add_argument("--churn-k", type=int, default=8)
    p.add_argument("--p-change", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare-literal", action="store_true")
    p.add_argument("--out", help="output directory for bandwidth.csv")
    p.set_defaults(func=cmd_bandwidth)

    p = sub.add_parser("snapshot", help="build or inspect list snapshots and batches")
    ssub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = ssub.add_parser("encode", help="bootstrap a list from a trace and write its snapshot")
    e.add_argument("--trace", required=True)
    e.add_argument("--n-popular", type=int, default=25_000)
    e.add_argument("--bootstrap", type=int, default=86_400, help="seconds of trace to count")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_snapshot_encode)
    d = ssub.add_parser("decode", help="dump a snapshot or update batch as CSV")
    d.add_argument("file")
    d.add_argument("--out", help="CSV path (default stdout)")
    d.set_defaults(func=cmd_snapshot_decode)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvariantViolation, LedgerMismatch) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (PopDNSError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
