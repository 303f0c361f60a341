"""Authoritative DNS as seen by the public server, with load-balancer churn.

Every address record rotates within its own universe of ``k`` addresses.
On each TTL expiry the answer moves to a different member with probability
``p_change``. A ``cname_fraction`` of records are aliases to another record
of the same qtype; alias targets never change.
"""

from __future__ import annotations

import hashlib
import ipaddress
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..names import QType, RecordAnswer, RecordKey

TTL_VALUES = (30, 60, 300, 3600, 86400)
TTL_WEIGHTS = (0.20, 0.20, 0.25, 0.25, 0.10)


@dataclass(frozen=True)
class ChurnModel:
    k: int = 8
    p_change: float = 0.5
    ttl_values: tuple[int, ...] = TTL_VALUES
    ttl_weights: tuple[float, ...] = TTL_WEIGHTS
    cname_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.p_change <= 1.0:
            raise ValueError("p_change must lie in [0, 1]")
        if not 0.0 <= self.cname_fraction < 1.0:
            raise ValueError("cname_fraction must lie in [0, 1)")
        if len(self.ttl_values) != len(self.ttl_weights) or not self.ttl_values:
            raise ValueError("ttl_values and ttl_weights differ in length")
        if min(self.ttl_values) < 1 or min(self.ttl_weights) < 0 or sum(self.ttl_weights) <= 0:
            raise ValueError("bad TTL distribution")

    def as_dict(self) -> dict:
        return {
            "churn_k": self.k,
            "p_change": self.p_change,
            "ttl_values": " ".join(map(str, self.ttl_values)),
            "ttl_weights": " ".join(map(repr, self.ttl_weights)),
            "cname_fraction": self.cname_fraction,
            "churn_seed": self.seed,
        }


class Upstream:
    """Answer oracle over a fixed key universe (index = key id)."""

    def __init__(self, keys: Sequence[RecordKey], model: ChurnModel = ChurnModel()):
        self.keys = list(keys)
        self.model = model
        n = len(self.keys)
        self._id = {k: i for i, k in enumerate(self.keys)}
        rng = np.random.default_rng(model.seed)
        w = np.asarray(model.ttl_weights, dtype=float)
        self.ttl = rng.choice(np.asarray(model.ttl_values, dtype=np.int64), size=n, p=w / w.sum())
        self.current = rng.integers(0, model.k, size=n)
        self.target = np.full(n, -1, dtype=np.int64)
        alias = rng.random(n) < model.cname_fraction
        qtypes = np.fromiter((int(k.qtype) for k in self.keys), dtype=np.int64, count=n)
        for qt in np.unique(qtypes):
            same = qtypes == qt
            heads = np.flatnonzero(same & alias)
            pool = np.flatnonzero(same & ~alias)
            if len(pool) and len(heads):
                self.target[heads] = pool[rng.integers(0, len(pool), size=len(heads))]
        self._salt = struct.pack("<Q", model.seed & 0xFFFFFFFFFFFFFFFF)
        self._addr: dict[int, RecordAnswer] = {}

    def __len__(self) -> int:
        return len(self.keys)

    def id_of(self, key: RecordKey) -> int | None:
        return self._id.get(key)

    def is_cname(self, i: int) -> bool:
        return self.target[i] >= 0

    def address(self, i: int, j: int) -> RecordAnswer:
        """Member ``j`` of record ``i``'s answer universe."""
        slot = i * self.model.k + j
        cached = self._addr.get(slot)
        if cached is not None:
            return cached
        d = hashlib.blake2b(self._salt + struct.pack("<QQ", i, j), digest_size=16).digest()
        if self.keys[i].qtype is QType.AAAA:
            addr = ipaddress.IPv6Address(b"\x20\x01\x0d\xb8" + d[:12])
        else:
            addr = ipaddress.IPv4Address(d[:4])
        self._addr[slot] = addr
        return addr

    def answer(self, i: int) -> RecordAnswer:
        t = self.target[i]
        if t >= 0:
            return self.keys[t].name
        return self.address(i, int(self.current[i]))

    def resolve(self, key: RecordKey) -> tuple[RecordAnswer, int] | None:
        i = self._id.get(key)
        if i is None:
            return None
        return self.answer(i), int(self.ttl[i])

    __call__ = resolve

    def churn_many(self, ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Expire ``ids`` at once; returns the subset whose answer changed."""
        ids = np.asarray(ids, dtype=np.int64)
        draw = rng.random(len(ids))
        step = rng.integers(1, max(self.model.k, 2), size=len(ids))
        if self.model.k < 2:
            return ids[:0]
        hit = (draw < self.model.p_change) & (self.target[ids] < 0)
        moved = ids[hit]
        self.current[moved] = (self.current[moved] + step[hit]) % self.model.k
        return moved


def churn_step(oracle: Upstream, record: RecordKey, now: float,
               rng: np.random.Generator) -> RecordAnswer | None:
    """TTL expiry of ``record`` at ``now``: maybe move to another universe member."""
    i = oracle.id_of(record)
    if i is None:
        raise KeyError(f"{record} is not tracked by the oracle")
    moved = oracle.churn_many(np.array([i]), rng)
    return oracle.answer(i) if len(moved) else None
