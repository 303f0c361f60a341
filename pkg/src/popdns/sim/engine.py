"""Trace-driven simulation of the popularity list service.

One logical timeline: a bootstrap day builds the list, then each refresh
period (an hour by default) replays the clients' queries against the list,
lets the upstream churn re-query loop emit update batches every ``ttl_min``
window, runs a voting round and refreshes the membership.
"""

from __future__ import annotations

import csv
import gc
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
import numpy as np

from ..delta import AnswerChange, Literal, PoolRelative, RecordAdd, RecordRemove, UpdateBatch
from ..delta import apply_batch, apply_deltas, encode_batch
from ..errors import InvariantViolation
from ..mixnet import make_network, run_voting_round
from ..names import DomainName, RecordKey
from ..poplist import PopularityList, build_list, parse_snapshot, serialize_snapshot
from ..voting import Ballot, RoundConfig, WeightTable, plan_refresh, select_ballots
from .trace import Trace, domain_for_rank, qtype_for_rank
from .upstream import TTL_VALUES, TTL_WEIGHTS, ChurnModel, Upstream

MIX_MODES = ("crypto", "bypass")
FALLBACKS = ("tor3", "direct")


@dataclass
class SimConfig:
    n_popular: int = 25_000
    t_refresh: int = 3600
    ttl_min: int = 60
    rounds: int = 10
    v_max: int = 10
    p_vote: float = 0.3
    alpha: float = 0.1
    seed: int = 0
    fallback: str = "tor3"
    duration: int = 0  # seconds after bootstrap; 0 runs to the end of the trace
    bootstrap: int = 86_400
    mix_mode: str = "crypto"
    churn: bool = True
    churn_k: int = 8
    p_change: float = 0.5
    cname_fraction: float = 0.1
    ttl_values: tuple[int, ...] = TTL_VALUES
    ttl_weights: tuple[float, ...] = TTL_WEIGHTS
    replica_check: int = 24  # rounds between replica digest checks; 0 disables the replica

    def __post_init__(self):
        for name in ("n_popular", "t_refresh", "ttl_min", "rounds", "v_max", "bootstrap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.duration < 0 or self.replica_check < 0:
            raise ValueError("duration and replica_check must be non-negative")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")
        if self.mix_mode not in MIX_MODES:
            raise ValueError(f"mix_mode must be one of {MIX_MODES}")
        self.round_config()
        self.churn_model()

    def round_config(self) -> RoundConfig:
        return RoundConfig(t_refresh=self.t_refresh, v_max=self.v_max, p_vote=self.p_vote,
                           alpha=self.alpha, n_popular=self.n_popular)

    def churn_model(self) -> ChurnModel:
        return ChurnModel(k=self.churn_k, p_change=self.p_change, ttl_values=tuple(self.ttl_values),
                          ttl_weights=tuple(self.ttl_weights), cname_fraction=self.cname_fraction,
                          seed=self.seed)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}


@dataclass
class SimReport:
    config: SimConfig
    hour_start: list[int] = field(default_factory=list)  # seconds since trace start
    hourly_queries: list[int] = field(default_factory=list)
    hourly_hits: list[int] = field(default_factory=list)
    votes_per_round: list[int] = field(default_factory=list)
    voters_per_round: list[int] = field(default_factory=list)
    membership_changes: list[int] = field(default_factory=list)
    churn_bytes: int = 0
    refresh_bytes: int = 0
    batches: int = 0
    simulated_seconds: float = 0.0
    represented_hits: int = 0
    ledger_violations: int = 0
    replica_checks: int = 0
    users: int = 0

    @property
    def hourly_hit_ratio(self) -> list[float]:
        return [h / q if q else 0.0 for h, q in zip(self.hourly_hits, self.hourly_queries)]

    @property
    def mean_hit_ratio(self) -> float:
        """Mean over refresh periods that saw queries."""
        r = [h / q for h, q in zip(self.hourly_hits, self.hourly_queries) if q]
        return float(np.mean(r)) if r else 0.0

    @property
    def fallback_queries(self) -> int:
        return sum(self.hourly_queries) - sum(self.hourly_hits)

    def _per_hour(self, n: int) -> float:
        return n * 3600.0 / self.simulated_seconds if self.simulated_seconds else 0.0

    @property
    def bytes_per_hour(self) -> float:
        """Update bytes each client receives per hour (every client gets every batch)."""
        return self._per_hour(self.churn_bytes + self.refresh_bytes)

    @property
    def churn_bytes_per_hour(self) -> float:
        return self._per_hour(self.churn_bytes)

    @property
    def h(self) -> float:
        return self.mean_hit_ratio

    @property
    def voters(self) -> float:
        return float(np.mean(self.voters_per_round)) if self.voters_per_round else 0.0

    @property
    def q_v(self) -> float:
        """Share of local hits that the same client voted for in that round."""
        hits = sum(self.hourly_hits)
        return self.represented_hits / hits if hits else 0.0

    def summary(self) -> dict:
        out = {
            "mean_hit_ratio": self.mean_hit_ratio,
            "bytes_per_hour": self.bytes_per_hour,
            "churn_bytes_per_hour": self.churn_bytes_per_hour,
            "batches": self.batches,
            "fallback": self.config.fallback,
            "fallback_queries": self.fallback_queries,
            "ledger_violations": self.ledger_violations,
            "replica_checks": self.replica_checks,
            "h": self.h,
            "V": self.voters,
            "U": self.users,
            "q_v": self.q_v,
        }
        cfg = asdict(self.config)
        cfg["ttl_values"] = " ".join(map(str, self.config.ttl_values))
        cfg["ttl_weights"] = " ".join(map(repr, self.config.ttl_weights))
        out.update(cfg)
        return out

    def write(self, outdir: str | os.PathLike) -> None:
        """One CSV per metric; float formatting is repr so reruns are byte identical."""
        os.makedirs(outdir, exist_ok=True)
        _write_csv(os.path.join(outdir, "hit_ratio.csv"), ["hour", "ratio"],
                   [(i, r) for i, r in enumerate(self.hourly_hit_ratio)])
        _write_csv(os.path.join(outdir, "bandwidth.csv"), ["ttl_min", "n_popular", "bytes_per_hour"],
                   [(self.config.ttl_min, self.config.n_popular, self.bytes_per_hour)])
        _write_csv(os.path.join(outdir, "rounds.csv"),
                   ["round", "voters", "votes", "membership_changes"],
                   zip(range(len(self.votes_per_round)), self.voters_per_round,
                       self.votes_per_round, self.membership_changes))
        _write_csv(os.path.join(outdir, "summary.csv"), ["metric", "value"],
                   self.summary().items())


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- server-side state -------------------------------------------------------

class _Server:
    """The list plus integer-indexed bookkeeping for records of the trace universe."""

    def __init__(self, plist: PopularityList, upstream: Upstream, ttl_min: int,
                 replica: bool):
        self.plist = plist
        self.upstream = upstream
        n = len(upstream)
        self.ids = upstream._id
        self.ttl_ms = np.maximum(upstream.ttl, ttl_min) * 1000
        self.order = np.full(n, -1, dtype=np.int64)
        self.hit = np.zeros(n, dtype=bool)
        self.next_rq = np.full(n, np.inf)
        self.heads: set[int] = set()
        self.pooled: dict[int, int] = {}  # record * k + member -> pool index, once interned
        self.replica = parse_snapshot(serialize_snapshot(plist)) if replica else None
        self.bytes = {"churn": 0, "refresh": 0}
        self.batches = 0

    def track(self, key: RecordKey, order: int, due: float) -> int:
        i = self.ids[key]
        self.order[i] = order
        self.next_rq[i] = due
        entry = self.plist.entry_at(order)
        if isinstance(self.plist.pool[entry.answer], DomainName):
            self.heads.add(i)
        return i

    def untrack(self, key: RecordKey) -> None:
        i = self.ids[key]
        self.order[i] = -1
        self.hit[i] = False
        self.next_rq[i] = np.inf
        self.heads.discard(i)

    def update_hits(self, ids) -> None:
        keys = self.upstream.keys
        for i in ids:
            self.hit[i] = bool(self.plist.lookup(keys[i]))

    def broadcast(self, batch: UpdateBatch, kind: str) -> bytes:
        data = encode_batch(self.plist, batch)
        apply_deltas(self.plist, batch)
        if self.replica is not None:
            apply_batch(self.replica, data, inplace=True)
        self.bytes[kind] += len(data)
        self.batches += 1
        return data

    def churn_window(self, w_end: float, rng: np.random.Generator) -> None:
        due = np.flatnonzero(self.next_rq < w_end)
        if not len(due):
            return
        self.next_rq[due] += self.ttl_ms[due]
        moved = self.upstream.churn_many(due, rng)
        if not len(moved):
            return
        moved = moved[np.argsort(self.order[moved], kind="stable")]
        plist = self.plist
        entries = plist._entries
        k = self.upstream.model.k
        pooled = self.pooled
        deltas = []
        orders = self.order[moved].tolist()
        for i, j, order in zip(moved.tolist(), self.upstream.current[moved].tolist(), orders):
            cur = entries[order].answer
            idx = pooled.get(i * k + j)
            if idx is None:
                answer = self.upstream.address(i, j)
                idx = plist.pool_index(answer)
                if idx is None:
                    deltas.append(AnswerChange(order, Literal(answer)))
                    continue
                pooled[i * k + j] = idx
            if idx != cur:
                deltas.append(AnswerChange(order, PoolRelative(idx - cur)))
        if deltas:
            self.broadcast(UpdateBatch.next(plist, deltas), "churn")

    def check_replica(self) -> None:
        if self.replica is None:
            return
        if serialize_snapshot(self.replica) != serialize_snapshot(self.plist):
            raise InvariantViolation(
                f"client replica diverged from server list at version {self.plist.version}")


def _phase(rng: np.random.Generator, ttl_ms: np.ndarray) -> np.ndarray:
    return rng.random(len(ttl_ms)) * ttl_ms


@contextmanager
def _gc_paused():
    # millions of long-lived acyclic objects: generational sweeps only cost time
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def run_sim(config: SimConfig, trace: Trace, upstream: Upstream | None = None) -> SimReport:
    with _gc_paused():
        return _run_sim(config, trace, upstream)


def _run_sim(config: SimConfig, trace: Trace, upstream: Upstream | None) -> SimReport:
    if not len(trace):
        raise ValueError("empty trace")
    t0 = int(trace.t_ms[0])
    boot_end = t0 + config.bootstrap * 1000
    if int(trace.t_ms[-1]) < boot_end:
        raise ValueError("trace must span more than the bootstrap period")
    end = int(trace.t_ms[-1]) + 1
    if config.duration:
        end = min(end, boot_end + config.duration * 1000)
    rng_ballot, rng_churn, rng_mix, rng_phase = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4))
    if upstream is None:
        upstream = Upstream(trace.keys, config.churn_model())
    elif upstream.keys != trace.keys:
        raise ValueError("upstream must be built over the trace's key table")
    rc = config.round_config()
    nkeys = len(trace.keys)
    report = SimReport(config, users=len(trace.clients))

    # bootstrap: day-one raw counts are round 0
    boot = trace.slice_time(t0, boot_end)
    counts = np.bincount(trace.key_id[boot], minlength=nkeys).astype(float)
    table = WeightTable(rc.alpha, rc.epsilon_drop)
    table.register(trace.keys)
    nz = np.flatnonzero(counts)
    table.step_slots(nz, counts[nz])
    ranked = []
    for key in table.top(rc.n_popular):
        res = upstream.resolve(key)
        if res is not None:
            ranked.append((key, res[0], res[1]))
    server = _Server(build_list(ranked, upstream.resolve, rc.n_popular), upstream,
                     config.ttl_min, config.replica_check > 0)
    plist = server.plist
    members = [e for e in plist]
    ids = [server.ids[e.key] for e in members]
    due = boot_end + _phase(rng_phase, server.ttl_ms[ids])
    for e, d in zip(members, due.tolist()):
        server.track(e.key, e.order, d)
    server.update_hits(ids)

    if config.mix_mode == "crypto":
        clients = trace.clients
        registry, keypairs = make_network(len(clients), rng_mix)
        node_of = dict(zip(clients.tolist(), sorted(keypairs)))

    t = boot_end
    rnd = 0
    while t < end:
        t_next = min(t + config.t_refresh * 1000, end)
        sl = trace.slice_time(t, t_next)
        kid = trace.key_id[sl]
        cl = trace.client[sl]
        hits = server.hit[kid]
        report.hour_start.append((t - t0) // 1000)
        report.hourly_queries.append(len(kid))
        report.hourly_hits.append(int(hits.sum()))

        if config.churn:
            w = t
            while w < t_next:
                w_end = min(w + config.ttl_min * 1000, t_next)
                server.churn_window(w_end, rng_churn)
                w = w_end

        # voting round at the end of the period over this period's queries
        bc, bk = select_ballots(cl, kid, rc, rng_ballot)
        if config.mix_mode == "crypto" and len(bk):
            ballots: dict[int, list[RecordKey]] = {}
            for c, k in zip(bc.tolist(), bk.tolist()):
                ballots.setdefault(node_of[c], []).append(trace.keys[k])
            votes, ledger = run_voting_round({c: Ballot(tuple(v)) for c, v in ballots.items()},
                                             registry, config.rounds, rng_mix, keypairs,
                                             v_max=rc.v_max, on_mismatch="discard")
            report.ledger_violations += len(ledger.violations)
            vk = np.fromiter((server.ids[v] for v in votes), dtype=np.int64, count=len(votes))
        else:
            vk = bk
        vc = np.bincount(vk, minlength=nkeys)
        voted = np.flatnonzero(vc)
        table.step_slots(voted, vc[voted].astype(float))
        report.votes_per_round.append(int(len(vk)))
        report.voters_per_round.append(int(len(np.unique(bc))))
        if len(bk):
            ballot_pairs = bc * nkeys + bk
            hit_pairs = (cl * nkeys + kid)[hits]
            report.represented_hits += int(np.isin(hit_pairs, ballot_pairs).sum())

        batch = plan_refresh(table, plist, upstream.resolve, rc)
        gone = [plist.entry_at(d.record_order).key for d in batch.deltas
                if isinstance(d, RecordRemove)]
        added = [d.key for d in batch.deltas if isinstance(d, RecordAdd)]
        server.broadcast(batch, "refresh")
        for key in gone:
            server.untrack(key)
        touched = []
        for key in added:
            i = server.track(key, plist.order_of(key), t_next + server.ttl_ms[server.ids[key]])
            touched.append(i)
        server.update_hits(touched)
        # an alias resolves locally only while its target is listed
        if server.heads and (gone or added):
            changed = np.fromiter((server.ids[k] for k in gone), dtype=np.int64, count=len(gone))
            heads = np.fromiter(server.heads, dtype=np.int64, count=len(server.heads))
            hit_targets = np.isin(upstream.target[heads], np.concatenate([changed, touched]))
            server.update_hits(np.sort(heads[hit_targets]).tolist())
        report.membership_changes.append(len(added) + len(gone))

        rnd += 1
        if config.replica_check and rnd % config.replica_check == 0:
            server.check_replica()
            report.replica_checks += 1
        t = t_next

    if config.replica_check:
        server.check_replica()
        report.replica_checks += 1
    report.simulated_seconds = (end - boot_end) / 1000.0
    report.churn_bytes = server.bytes["churn"]
    report.refresh_bytes = server.bytes["refresh"]
    report.batches = server.batches
    return report


# -- churn-only bandwidth experiment -----------------------------------------

def synthetic_universe(n: int, aaaa_fraction: float = 0.3) -> list[RecordKey]:
    return [RecordKey(domain_for_rank(r), qtype_for_rank(r, aaaa_fraction)) for r in range(n)]


@dataclass
class ChurnReport:
    ttl_min: int
    n_popular: int
    hours: float
    bytes: int
    literal_bytes: int
    batches: int
    changes: int

    @property
    def bytes_per_hour(self) -> float:
        return self.bytes / self.hours

    @property
    def literal_bytes_per_hour(self) -> float:
        return self.literal_bytes / self.hours


def run_churn(n_popular: int = 10_000, hours: float = 24.0, ttl_min: int = 60,
              model: ChurnModel = ChurnModel(), seed: int = 0,
              literal_baseline: bool = False, warmup_hours: float = 0.0,
              aaaa_fraction: float = 0.3) -> ChurnReport:
    """Update traffic from upstream churn alone on a fixed membership.

    The list holds ``n_popular`` address records (plus any CNAME support) and
    never changes membership, isolating the re-query/broadcast loop. With
    ``literal_baseline`` every batch is also costed with all answers sent
    literally. The first ``warmup_hours`` run but are not measured, so a
    warm-up lets the pool fill with each record's answer universe.
    """
    from ..delta import literal_form

    keys = synthetic_universe(n_popular, aaaa_fraction)
    upstream = Upstream(keys, model)
    rng_churn, rng_phase = (np.random.default_rng(s)
                            for s in np.random.SeedSequence(seed).spawn(2))
    ranked = [(k, *upstream.resolve(k)) for k in keys]
    server = _Server(build_list(ranked, upstream.resolve, n_popular), upstream, ttl_min, False)
    ids = [server.ids[e.key] for e in server.plist]
    due = _phase(rng_phase, server.ttl_ms[ids])
    for i, d in zip(ids, due.tolist()):
        server.order[i] = server.plist.order_of(keys[i])
        server.next_rq[i] = d

    literal = 0
    changes = 0
    batches = 0
    start = warmup_hours * 3_600_000
    end = start + hours * 3_600_000
    step = ttl_min * 1000
    w = 0
    orig = server.broadcast

    def costed(batch: UpdateBatch, kind: str) -> bytes:
        nonlocal literal, changes, batches
        if w < start:
            orig(batch, "warmup")
            return
        changes += len(batch)
        batches += 1
        if literal_baseline:
            literal += len(encode_batch(server.plist, literal_form(batch, server.plist)))
        orig(batch, kind)

    server.broadcast = costed
    server.bytes["warmup"] = 0
    while w < end:
        w_end = min(w + step, end)
        server.churn_window(w_end, rng_churn)
        w = w_end
    return ChurnReport(ttl_min, n_popular, hours, server.bytes["churn"], literal, batches, changes)
