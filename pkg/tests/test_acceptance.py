"""Acceptance criteria, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; a summary with one PASS/FAIL
line per criterion is printed at the end of the session.
"""

import ipaddress
import itertools
import os
import subprocess
import sys
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from popdns.delta import (
    AnswerChange, Literal, PoolRelative, RecordAdd, RecordRemove, Replica, TtlChange,
    UpdateBatch, apply_deltas, encode_batch,
)
from popdns.errors import LedgerMismatch, QuotaViolation
from popdns.exposure import ExposureParams, Scheme, crossover, exposure_closed_form, exposure_monte_carlo
from popdns import mixnet
from popdns.mixnet import MixPath, make_network, node_shuffle, peel, run_voting_round, wrap_vote
from popdns.names import QType, RecordKey
from popdns.poplist import build_list, serialize_snapshot
from popdns.sim import SimConfig, gen_trace, run_churn, run_sim
from popdns.sim.engine import synthetic_universe
from popdns.sim.upstream import Upstream
from popdns.voting import Ballot, RoundConfig, WeightTable, bootstrap_weights, tally

from .oracles import steady_state_capture, zipf_top_mass

slow = pytest.mark.slow


def criterion(label, title):
    return pytest.mark.criterion(label, title)


# -- 1. hit-ratio ordering ---------------------------------------------------

TRACE = dict(clients=2000, days=10, rate=40.0, zipf_s=1.0, domains=1_000_000, seed=42)
N_VALUES = (10_000, 25_000, 100_000)


@pytest.fixture(scope="module")
def oracle_25k():
    # computed before any simulation runs
    raw = zipf_top_mass(25_000, TRACE["domains"], TRACE["zipf_s"])
    cfg = SimConfig()
    adjusted = steady_state_capture(25_000, TRACE["domains"], TRACE["zipf_s"], TRACE["clients"],
                                    TRACE["rate"] * cfg.t_refresh / 3600, cfg.p_vote, cfg.v_max,
                                    cfg.alpha)
    return raw, adjusted


@pytest.fixture(scope="module")
def zipf_trace(oracle_25k):
    return gen_trace(TRACE["clients"], TRACE["days"] * 86400, TRACE["rate"], TRACE["zipf_s"],
                     TRACE["domains"], TRACE["seed"])


def hit_config(n):
    # votes go through the in-process tally (mix_mode=bypass); hits do not depend on churn
    return SimConfig(n_popular=n, seed=TRACE["seed"], mix_mode="bypass", churn=False,
                     replica_check=0)


@slow
@criterion("1", "hit ratio increases with n_popular; N=25k within 0.03 of the adjusted Zipf oracle")
def test_hit_ratio_ordering(zipf_trace, oracle_25k, record_property):
    raw, adjusted = oracle_25k
    ratios = {n: run_sim(hit_config(n), zipf_trace).mean_hit_ratio for n in N_VALUES}
    again = run_sim(hit_config(N_VALUES[0]), zipf_trace).mean_hit_ratio
    record_property("detail", "h=" + ", ".join(f"{n}:{r:.4f}" for n, r in ratios.items()))
    record_property("detail", f"oracle raw={raw:.4f} adjusted={adjusted:.4f}")
    h = [ratios[n] for n in N_VALUES]
    assert h[0] < h[1] < h[2]
    assert again == ratios[N_VALUES[0]]
    assert abs(ratios[25_000] - adjusted) <= 0.03


# -- 2. bandwidth trend ------------------------------------------------------

@slow
@criterion("2", "bytes/hour non-increasing in ttl_min, ttl_min=60 within 10x of 67.5 KB/h, "
                "pool-relative >= 50% smaller than literal")
def test_bandwidth_trend(record_property):
    per_hour = {t: run_churn(10_000, 24, t).bytes_per_hour for t in (30, 60, 120, 300)}
    record_property("detail", ", ".join(f"ttl{t}:{b / 1000:.1f}KB/h" for t, b in per_hour.items()))
    resident = run_churn(10_000, 2, 60, literal_baseline=True, warmup_hours=4, aaaa_fraction=1.0)
    saving = 1 - resident.bytes / resident.literal_bytes
    record_property("detail", f"pool-resident AAAA saving {saving:.1%}")
    values = [per_hour[t] for t in (30, 60, 120, 300)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert 67_500 / 10 <= per_hour[60] <= 67_500 * 10
    assert saving >= 0.5


# -- 3. replica convergence --------------------------------------------------

def random_batches(server, rng, n_events, per_batch):
    """Yield batches of random churn and membership events against ``server``."""
    fresh = itertools.count()
    made = 0
    while made < n_events:
        live = [e.order for e in server]
        by_type = {}
        for i, a in enumerate(server.pool):
            by_type.setdefault(type(a), []).append(i)
        touched = set()
        deltas = []
        for _ in range(min(per_batch, n_events - made)):
            made += 1
            kind = rng.random()
            order = live[int(rng.integers(0, len(live)))]
            if order in touched:
                continue
            e = server.entry_at(order)
            if kind < 0.6:
                same = by_type[type(server.pool[e.answer])]
                if rng.random() < 0.7 and len(same) > 1:
                    idx = same[int(rng.integers(0, len(same)))]
                    if idx != e.answer:
                        deltas.append(AnswerChange(order, PoolRelative(idx - e.answer)))
                        touched.add(order)
                    continue
                if e.key.qtype is QType.A:
                    new = ipaddress.IPv4Address(rng.bytes(4))
                elif e.key.qtype is QType.AAAA:
                    new = ipaddress.IPv6Address(rng.bytes(16))
                else:
                    continue
                deltas.append(AnswerChange(order, Literal(new)))
                touched.add(order)
            elif kind < 0.7:
                deltas.append(TtlChange(order, int(rng.integers(1, 86400))))
                touched.add(order)
            elif kind < 0.85:
                key = RecordKey.of(f"n{next(fresh)}.fresh.example", "A")
                if rng.random() < 0.5 and by_type.get(ipaddress.IPv4Address):
                    pool_ids = by_type[ipaddress.IPv4Address]
                    deltas.append(RecordAdd(key, pool_ids[int(rng.integers(0, len(pool_ids)))], 60))
                else:
                    deltas.append(RecordAdd(key, ipaddress.IPv4Address(rng.bytes(4)), 60))
            elif len(live) - len(touched) > 100:
                deltas.append(RecordRemove(order))
                touched.add(order)
        yield UpdateBatch.next(server, deltas)


@slow
@criterion("3", "replica converges byte-exact over 1e5 events; version gaps recover by refetch")
def test_replica_convergence(record_property):
    rng = np.random.default_rng(3)
    keys = synthetic_universe(2000)
    up = Upstream(keys)
    server = build_list([(k, *up.resolve(k)) for k in keys], up.resolve, 2000)
    replica = Replica(serialize_snapshot(server), lambda: serialize_snapshot(server))
    drops = dupes = 0
    last = None
    for batch in random_batches(server, rng, 100_000, 100):
        data = encode_batch(server, batch)
        apply_deltas(server, batch)
        roll = rng.random()
        if roll < 0.01:
            drops += 1  # lost broadcast: next batch arrives with a gap
        elif roll < 0.02 and last is not None:
            dupes += 1
            replica.receive(data)
            replica.receive(data)  # repeated delivery
        else:
            replica.receive(data)
        last = data
    if drops and replica.version != server.version:
        replica.receive(last)
    record_property("detail", f"version {server.version}, {drops} drops, {dupes} repeats, "
                              f"{replica.refetches} refetches")
    assert serialize_snapshot(replica.list) == serialize_snapshot(server)
    assert replica.refetches >= dupes and drops + dupes > 0


# -- 4. weight dynamics --------------------------------------------------------

@criterion("4", "w_m = 0.1 n_m + 0.9 w_(m-1) to 1e-9; zero-vote decay 0.9^k; bootstrap = count order")
def test_weight_dynamics(record_property):
    rng = np.random.default_rng(4)
    keys = [RecordKey.of(f"w{i}.example") for i in range(300)]
    table = WeightTable(alpha=0.1)
    ref = np.zeros(len(keys))
    worst = 0.0
    for _ in range(60):
        n = rng.poisson(rng.uniform(0, 20, size=len(keys)))
        table.step({k: int(c) for k, c in zip(keys, n) if c})
        ref = 0.1 * n + 0.9 * ref
        got = np.array([table.get(k) for k in keys])
        live = ref >= 1e-6
        worst = max(worst, float(np.max(np.abs(got[live] - ref[live]))))
    start = {k: table.get(k) for k in keys}
    watched = [k for k in keys if start[k] > 1.0][:20]
    for k in range(1, 41):
        table.step({})
        for key in watched:
            assert abs(table.get(key) - start[key] * 0.9 ** k) <= 1e-9 * max(1.0, start[key])
    day = gen_trace(300, 86400, 20, 1.0, 50_000, seed=4)
    boot = bootstrap_weights([day.keys[i] for i in day.key_id.tolist()], RoundConfig())
    counts = np.bincount(day.key_id)
    by_count = sorted(np.flatnonzero(counts).tolist(),
                      key=lambda i: (-counts[i], day.keys[i].sort_key))
    record_property("detail", f"max |error| {worst:.2e}")
    assert worst <= 1e-9
    assert boot.top(len(boot)) == [day.keys[i] for i in by_count]


# -- 5. mixnet -----------------------------------------------------------------

NETWORK_SIZES = range(3, 51)


@pytest.fixture(scope="module")
def networks():
    rng = np.random.default_rng(50)
    return {n: make_network(n, rng) for n in NETWORK_SIZES}


@slow
@criterion("5a", "1e4 end-to-end rounds (3-50 clients, R in 1,2,10) preserve the vote multiset")
def test_mix_multiset(networks, record_property):
    rng = np.random.default_rng(51)
    exact = 0
    trials = 10_000
    for t in range(trials):
        rounds = (1, 2, 10)[t % 3]
        n = int(rng.integers(max(3, rounds + 1), 51))
        reg, keys = networks[n]
        ballots = {c: Ballot((RecordKey.of(f"v{int(rng.integers(0, 40))}.example"),))
                   for c in range(n)}
        votes, ledger = run_voting_round(ballots, reg, rounds, rng, keys)
        exact += Counter(votes) == Counter(v for b in ballots.values() for v in b) and ledger.conserved()
    record_property("detail", f"{exact}/{trials} rounds exact")
    assert exact == trials


@criterion("5b", "every injected or dropped onion is flagged at its (node, round)")
def test_mix_ledger(networks, record_property):
    rng = np.random.default_rng(52)
    caught = 0
    trials = 200
    for t in range(trials):
        n = int(rng.integers(4, 20))
        reg, keys = networks[n]
        rounds = int(rng.integers(1, min(n, 6)))
        ballots = {c: Ballot((RecordKey.of(f"l{c}.example"),)) for c in range(n)}
        target_round = int(rng.integers(0, rounds))
        extra = t % 2 == 0
        hit = []

        def tamper(node, r, out):
            if r == target_round and not hit and out:
                hit.append((node, r))
                return out + [out[0]] if extra else out[1:]
            return out

        try:
            run_voting_round(ballots, reg, rounds, rng, keys, tamper=tamper)
        except LedgerMismatch as exc:
            caught += [(exc.node, exc.round)] == hit
    record_property("detail", f"{caught}/{trials} detected at the right place")
    assert caught == trials


@criterion("5c", "ballots over v_max are rejected")
def test_mix_quota(networks):
    reg, keys = networks[12]
    rng = np.random.default_rng(53)
    big = Ballot(tuple(RecordKey.of(f"q{i}.example") for i in range(11)))
    ok = Ballot(tuple(RecordKey.of(f"q{i}.example") for i in range(10)))
    with pytest.raises(QuotaViolation):
        run_voting_round({0: big, 1: ok}, reg, 2, rng, keys, v_max=10)
    votes, _ = run_voting_round({1: ok}, reg, 2, rng, keys, v_max=10)
    assert Counter(votes) == Counter(ok)
    rejected = []
    assert tally([big, ok], v_max=10, rejected=rejected) == Counter(ok) and rejected == [big]


@criterion("5d", "4-element shuffles uniform over 24 orders (chi-square p >= 0.001, 1e4 trials)")
def test_mix_shuffle_uniform(networks, record_property):
    reg, keys = networks[5]
    rng = np.random.default_rng(54)
    votes = [RecordKey.of(f"s{i}.example") for i in range(4)]
    batch = [wrap_vote(v, MixPath((0,)), reg, rng) for v in votes]
    seen = Counter()
    for _ in range(10_000):
        out = node_shuffle(batch, keys[0], rng).items
        seen[tuple(votes.index(v) for v in out)] += 1
    counts = [seen[p] for p in itertools.permutations(range(4))]
    p = stats.chisquare(counts).pvalue
    record_property("detail", f"p={p:.3f}")
    assert sum(counts) == 10_000 and p >= 0.001


def unlinkability_trial(n, rounds, reg, keys, rng, monkeypatch):
    """One round where every node but ``honest`` is corrupted.

    The adversary runs the server, so it knows which onion the target
    submitted, and holds the corrupted nodes' keys, so it can follow an onion
    through their shuffles. At the honest node its belief spreads evenly over
    the output batch. Returns (guessed right, size of the honest batch).
    """
    honest = int(rng.integers(0, n))
    target = int((honest + 1 + rng.integers(0, n - 1)) % n)
    ballots = {c: Ballot((RecordKey.of(f"u{c}.example"),)) for c in range(n)}
    secret = ballots[target].votes[0]
    belief: dict = {}
    seen_batch = []

    real_wrap = mixnet.wrap_vote

    def spy_wrap(vote, path, registry, wrap_rng=None):
        onion = real_wrap(vote, path, registry, wrap_rng)
        if vote == secret:
            belief[onion] = 1.0
        return onion

    def observe(r, node, batch, out):
        mass = [belief.pop(o, 0.0) for o in batch]
        if not any(mass):
            return
        if node == honest:
            seen_batch.append(len(out))
            for item in out:
                belief[item] = belief.get(item, 0.0) + sum(mass) / len(out)
            return
        for o, m in zip(batch, mass):
            if m:
                item = peel(o, keys[node])[0]
                belief[item] = belief.get(item, 0.0) + m

    monkeypatch.setattr(mixnet, "wrap_vote", spy_wrap)
    mixnet.run_voting_round(ballots, reg, rounds, rng, keys, observer=observe)
    monkeypatch.setattr(mixnet, "wrap_vote", real_wrap)
    best = max(belief.values())
    candidates = sorted((v for v, m in belief.items() if m == best), key=lambda v: v.sort_key)
    guess = candidates[int(rng.integers(0, len(candidates)))]
    return guess == secret, seen_batch[0]


@slow
@criterion("5e", "adversary holding all but one node links a vote no better than 1/|batch| + 3 sigma")
def test_mix_unlinkability(networks, monkeypatch, record_property):
    n, rounds = 5, 4  # each path visits every other client, so it always crosses the honest node
    reg, keys = networks[n]
    rng = np.random.default_rng(55)
    trials = 10_000
    wins = 0
    chance = np.empty(trials)
    for t in range(trials):
        won, size = unlinkability_trial(n, rounds, reg, keys, rng, monkeypatch)
        wins += won
        chance[t] = 1 / size
    rate = wins / trials
    bound = chance.mean() + 3 * np.sqrt(np.sum(chance * (1 - chance))) / trials
    record_property("detail", f"accuracy {rate:.4f} vs bound {bound:.4f}")
    assert rate <= bound


# -- 6. exposure model ---------------------------------------------------------

GRID = [i / 20 for i in range(21)]
DEFAULTS = ExposureParams(c=0.0, users=10_000, voters=10_000, h=0.944, rounds=10, q_v=0.3)


@criterion("6a", "exposure in [0,1] and non-decreasing in c for every scheme")
def test_exposure_range_monotone():
    for scheme in Scheme:
        for voters in (50, 10_000):
            curve = [exposure_closed_form(DEFAULTS.with_(c=c, scheme=scheme, voters=voters)) for c in GRID]
            assert all(0 <= e <= 1 for e in curve)
            assert all(a <= b for a, b in zip(curve, curve[1:]))


@pytest.mark.xfail(strict=True, reason="popdns hit queries that are not voted on are never observed, "
                                       "so exposure at c = 1 is 1 - h + h*q_v, not 1")
@criterion("6b", "c = 1 gives exposure 1 for every scheme")
def test_exposure_full_collusion(record_property):
    at_one = {s.value: exposure_closed_form(DEFAULTS.with_(c=1.0, scheme=s)) for s in Scheme}
    record_property("detail", ", ".join(f"{k}={v:.4f}" for k, v in at_one.items()))
    assert all(v == 1.0 for v in at_one.values())


@criterion("6c", "c = 0, tor3 gives 1/U")
def test_exposure_no_collusion():
    assert exposure_closed_form(DEFAULTS.with_(scheme=Scheme.TOR3)) == pytest.approx(1 / 10_000, abs=1e-15)


@criterion("6d", "V = 50 and V = 10 000 curves differ by < 0.01 for c >= 0.2")
def test_exposure_voter_pool(record_property):
    gap = max(abs(exposure_closed_form(DEFAULTS.with_(c=c, voters=50))
                  - exposure_closed_form(DEFAULTS.with_(c=c, voters=10_000)))
              for c in np.linspace(0.2, 1.0, 81))
    record_property("detail", f"max gap {gap:.5f}")
    assert gap < 0.01


@criterion("6e", "popdns < tor3 at c = 0.5; popdns > tor3 only at small c")
def test_exposure_crossover(record_property):
    for voters in (50, 10_000):
        p = DEFAULTS.with_(voters=voters)
        pop = exposure_closed_form(p.with_(c=0.5))
        tor = exposure_closed_form(p.with_(c=0.5, scheme=Scheme.TOR3))
        assert pop < tor
        x = crossover(p)
        record_property("detail", f"V={voters}: crossover c={x:.3f}")
        assert x is not None and x < 0.5
        for c in np.linspace(x + 1e-6, 1.0, 200):
            assert exposure_closed_form(p.with_(c=c)) <= exposure_closed_form(p.with_(c=c, scheme=Scheme.TOR3))


@slow
@criterion("6f", "Monte Carlo within 3 stderr of closed form at 1e6 trials")
def test_exposure_monte_carlo(record_property):
    worst = 0.0
    for scheme in Scheme:
        for c in [i / 10 for i in range(1, 10)]:
            p = DEFAULTS.with_(c=c, scheme=scheme, voters=50)
            est, err = exposure_monte_carlo(p, 1_000_000, seed=int(c * 10))
            exact = exposure_closed_form(p)
            z = abs(est - exact) / err if err else (0.0 if est == exact else np.inf)
            worst = max(worst, z)
    record_property("detail", f"worst |z| {worst:.2f}")
    assert worst <= 3


# -- 7. determinism ------------------------------------------------------------

def run_cli(args, cwd):
    code = subprocess.run([sys.executable, "-m", "popdns.cli", *args], cwd=cwd,
                          capture_output=True).returncode
    assert code == 0, args
    out = {}
    for root, _, files in os.walk(cwd):
        for f in files:
            with open(os.path.join(root, f), "rb") as fh:
                out[os.path.relpath(os.path.join(root, f), cwd)] = fh.read()
    return out


@slow
@criterion("7", "repeated CLI runs with the same inputs write byte-identical files")
def test_cli_determinism(tmp_path, record_property):
    commands = [
        ["gen-trace", "--clients", "60", "--hours", "30", "--domains", "5000", "--seed", "7",
         "--out", "t.csv"],
        ["run-sim", "--trace", "t.csv", "--n-popular", "300", "--mix-mode", "crypto",
         "--rounds", "3", "--ttl-min", "60", "--out", "sim"],
        ["mix-round", "--clients", "15", "--rounds", "3", "--seed", "2", "--out", "mix"],
        ["exposure", "--c", "0.1,0.5,0.9", "--trials", "20000", "--seed", "3", "--out", "exp"],
        ["exposure", "--from-report", "sim", "--out", "exp2"],
        ["bandwidth", "--ttl-min", "60,300", "--n-popular", "500", "--hours", "1",
         "--compare-literal", "--out", "bw"],
        ["snapshot", "encode", "--trace", "t.csv", "--n-popular", "300", "--out", "list.bin"],
        ["snapshot", "decode", "list.bin", "--out", "list.csv"],
    ]
    runs = []
    for rep in range(2):
        d = tmp_path / f"run{rep}"
        d.mkdir()
        for args in commands:
            files = run_cli(args, d)
        runs.append(files)
    record_property("detail", f"{len(runs[0])} files compared")
    assert runs[0].keys() == runs[1].keys()
    assert all(runs[0][k] == runs[1][k] for k in runs[0])
