"""Query traces: CSV ingestion, synthetic Zipf workloads, array storage."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ..errors import DomainNameError, TraceFormatError, UnsupportedType
from ..names import DomainName, QType, RecordKey, parse_domain

HEADER = ["t_ms", "client_id", "qname", "qtype"]

SUBDOMAINS = ("www", "api", "cdn", "img")
TLDS = ("com", "com", "com", "net", "org", "io", "de", "se", "co", "uk")


@dataclass(frozen=True)
class TraceEvent:
    t: int  # ms since epoch
    client: int
    key: RecordKey


class Trace:
    """Column store of events: ``t_ms``, ``client`` and ``key_id`` into ``keys``.

    Events are time sorted. ``keys`` holds every distinct queried record once;
    ``key_id`` indexes it, so simulation code can stay in integer arrays.
    """

    def __init__(self, t_ms: np.ndarray, client: np.ndarray, key_id: np.ndarray,
                 keys: Sequence[RecordKey]):
        self.t_ms = np.asarray(t_ms, dtype=np.int64)
        self.client = np.asarray(client, dtype=np.int64)
        self.key_id = np.asarray(key_id, dtype=np.int64)
        self.keys = list(keys)
        if not len(self.t_ms) == len(self.client) == len(self.key_id):
            raise ValueError("trace columns differ in length")
        if len(self.t_ms) and np.any(np.diff(self.t_ms) < 0):
            raise ValueError("trace events must be time sorted")
        if len(self.key_id) and (self.key_id.min() < 0 or self.key_id.max() >= len(self.keys)):
            raise ValueError("key id out of range")

    @classmethod
    def from_events(cls, events: Sequence[TraceEvent]) -> "Trace":
        ids: dict[RecordKey, int] = {}
        key_id = [ids.setdefault(e.key, len(ids)) for e in events]
        return cls([e.t for e in events], [e.client for e in events], key_id, list(ids))

    def __len__(self) -> int:
        return len(self.t_ms)

    def __getitem__(self, i: int) -> TraceEvent:
        return TraceEvent(int(self.t_ms[i]), int(self.client[i]), self.keys[self.key_id[i]])

    def __iter__(self) -> Iterator[TraceEvent]:
        keys = self.keys
        for t, c, k in zip(self.t_ms.tolist(), self.client.tolist(), self.key_id.tolist()):
            yield TraceEvent(t, c, keys[k])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return list(self) == list(other)

    @property
    def clients(self) -> np.ndarray:
        return np.unique(self.client)

    @property
    def span_ms(self) -> int:
        return int(self.t_ms[-1] - self.t_ms[0]) if len(self) else 0

    def slice_time(self, start_ms: int, end_ms: int) -> slice:
        lo, hi = np.searchsorted(self.t_ms, [start_ms, end_ms], side="left")
        return slice(int(lo), int(hi))


def load_trace(path: str | os.PathLike) -> Trace:
    """Read a trace CSV; malformed lines raise TraceFormatError with the line number."""
    t_ms: list[int] = []
    client: list[int] = []
    key_id: list[int] = []
    ids: dict[tuple[str, str], int] = {}
    keys: list[RecordKey] = []
    last = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Trace([], [], [], [])
        if header != HEADER:
            raise TraceFormatError(1, f"expected header {','.join(HEADER)}")
        for row in reader:
            line = reader.line_num
            if len(row) != 4:
                raise TraceFormatError(line, f"expected 4 fields, got {len(row)}")
            try:
                t, c = int(row[0]), int(row[1])
            except ValueError:
                raise TraceFormatError(line, "t_ms and client_id must be integers") from None
            if t < 0 or c < 0:
                raise TraceFormatError(line, "negative timestamp or client id")
            if last is not None and t < last:
                raise TraceFormatError(line, f"timestamps not sorted ({t} < {last})")
            last = t
            ident = (row[2], row[3])
            kid = ids.get(ident)
            if kid is None:
                if row[3] not in ("A", "AAAA"):
                    raise UnsupportedType(f"line {line}: unsupported qtype {row[3]!r}")
                try:
                    key = RecordKey(parse_domain(row[2]), QType[row[3]])
                except DomainNameError as exc:
                    raise TraceFormatError(line, f"bad qname: {exc}") from None
                kid = ids[ident] = len(keys)
                keys.append(key)
            t_ms.append(t)
            client.append(c)
            key_id.append(kid)
    return Trace(t_ms, client, key_id, keys)


def write_trace(trace: Trace, path: str | os.PathLike) -> None:
    names = [f"{k.name},{k.qtype.name}" for k in trace.keys]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(HEADER) + "\n")
        for t, c, k in zip(trace.t_ms.tolist(), trace.client.tolist(), trace.key_id.tolist()):
            fh.write(f"{t},{c},{names[k]}\n")


# -- synthetic workloads -----------------------------------------------------

def _base36(n: int) -> str:
    digits = "0123456789abcdefghijklmnopqrstuvwxyz"
    out = ""
    while True:
        n, r = divmod(n, 36)
        out = digits[r] + out
        if not n:
            return out


def domain_for_rank(rank: int) -> DomainName:
    """Deterministic name for universe rank ``rank``; four subdomains share a site."""
    site, sub = divmod(rank, len(SUBDOMAINS))
    return DomainName((SUBDOMAINS[sub], "s" + _base36(site), TLDS[site % len(TLDS)]))


def qtype_for_rank(rank: int, aaaa_fraction: float) -> QType:
    # Weyl sequence: a fixed, well spread subset of ranks serves AAAA
    frac = (rank * 0.6180339887498949) % 1.0
    return QType.AAAA if frac < aaaa_fraction else QType.A


def zipf_cdf(s: float, domains: int) -> np.ndarray:
    w = np.arange(1, domains + 1, dtype=float) ** -s
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


def harmonic(n: int, s: float = 1.0) -> float:
    return float(np.sum(np.arange(1, n + 1, dtype=float) ** -s))


def gen_trace(clients: int, duration: float, rate: float, zipf_s: float, domains: int,
              seed: int, aaaa_fraction: float = 0.3, start_ms: int = 0) -> Trace:
    """Synthetic trace: Poisson arrivals per client, Zipf(``zipf_s``) over ranked domains.

    Each domain is queried under one fixed qtype, so a record's popularity is
    exactly its domain's. ``duration`` is in seconds and ``rate`` in queries
    per client per hour.
    """
    if min(clients, duration, rate, zipf_s, domains) <= 0:
        raise ValueError("all trace parameters must be positive")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(rate * duration / 3600.0, size=clients)
    total = int(counts.sum())
    client = np.repeat(np.arange(clients, dtype=np.int64), counts)
    t = start_ms + np.floor(rng.random(total) * duration * 1000.0).astype(np.int64)
    ranks = np.searchsorted(zipf_cdf(zipf_s, domains), rng.random(total), side="right")
    ranks = np.minimum(ranks, domains - 1)
    order = np.lexsort((client, t))
    t, client, ranks = t[order], client[order], ranks[order]
    uniq, key_id = np.unique(ranks, return_inverse=True)
    keys = [RecordKey(domain_for_rank(r), qtype_for_rank(r, aaaa_fraction))
            for r in uniq.tolist()]
    return Trace(t, client, key_id, keys)
