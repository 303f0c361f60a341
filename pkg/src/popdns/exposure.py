"""Exposure rate: chance the resolver/server coalition attributes a query to its user.

Model: a query (or the vote derived from it) is deanonymised exactly when
every relay or mix hop on its path colludes, each independently with
probability ``c``; otherwise the adversary guesses uniformly within the
anonymity set (all ``users`` for relayed queries, the round's ``voters``
for votes). Queries answered locally and never voted on are not observed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np


class Scheme(str, enum.Enum):
    DIRECT = "direct"
    SINGLE_RELAY = "single_relay"
    TOR3 = "tor3"
    POPDNS = "popdns"


TOR_HOPS = 3


@dataclass(frozen=True)
class ExposureParams:
    c: float
    users: int = 10_000
    voters: int = 10_000
    h: float = 0.944
    rounds: int = 10
    q_v: float = 0.3
    scheme: Scheme = Scheme.POPDNS

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        for name in ("c", "h", "q_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.users >= self.voters >= 1:
            raise ValueError("need users >= voters >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def with_(self, **changes) -> "ExposureParams":
        return replace(self, **changes)


def _traced(c: float, hops: int, crowd: int) -> float:
    full = c ** hops
    return full + (1.0 - full) / crowd


def exposure_closed_form(p: ExposureParams) -> float:
    if p.scheme is Scheme.DIRECT:
        return 1.0
    if p.scheme is Scheme.SINGLE_RELAY:
        return _traced(p.c, 1, p.users)
    tor = _traced(p.c, TOR_HOPS, p.users)
    if p.scheme is Scheme.TOR3:
        return tor
    return (1.0 - p.h) * tor + p.h * p.q_v * _traced(p.c, p.rounds, p.voters)


def exposure_monte_carlo(p: ExposureParams, trials: int = 1_000_000, seed: int = 0,
                         chunk: int = 200_000) -> tuple[float, float]:
    """Simulate the adversary's guess per query. Returns ``(estimate, stderr)``.

    Chunks draw from independent child seeds of ``seed`` so the result does
    not depend on how the work is split across workers.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    n_chunks = -(-trials // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    correct = 0
    for i, ss in enumerate(children):
        n = min(chunk, trials - i * chunk)
        correct += int(_simulate(p, n, np.random.default_rng(ss)).sum())
    est = correct / trials
    return est, float(np.sqrt(est * (1.0 - est) / trials))


def _guess(rng: np.random.Generator, hops: int, c: float, crowd: int, n: int) -> np.ndarray:
    traced = np.all(rng.random((n, hops)) < c, axis=1)
    lucky = rng.integers(0, crowd, size=n) == 0
    return traced | lucky


def _simulate(p: ExposureParams, n: int, rng: np.random.Generator) -> np.ndarray:
    if p.scheme is Scheme.DIRECT:
        return np.ones(n, dtype=bool)
    if p.scheme is Scheme.SINGLE_RELAY:
        return _guess(rng, 1, p.c, p.users, n)
    if p.scheme is Scheme.TOR3:
        return _guess(rng, TOR_HOPS, p.c, p.users, n)
    hit = rng.random(n) < p.h
    voted = hit & (rng.random(n) < p.q_v)
    miss_ok = _guess(rng, TOR_HOPS, p.c, p.users, n)
    vote_ok = _guess(rng, p.rounds, p.c, p.voters, n)
    return np.where(hit, voted & vote_ok, miss_ok)


def exposure_curve(p: ExposureParams, cs: Iterable[float]) -> list[tuple[float, float]]:
    return [(float(c), exposure_closed_form(p.with_(c=float(c)))) for c in cs]


def low_collusion_penalty(p: ExposureParams) -> float:
    """popdns minus tor3 exposure at ``p.c``; positive where voting costs privacy."""
    return (exposure_closed_form(p.with_(scheme=Scheme.POPDNS))
            - exposure_closed_form(p.with_(scheme=Scheme.TOR3)))


def crossover(p: ExposureParams, tol: float = 1e-9) -> float | None:
    """Smallest ``c`` above which popdns beats tor3, or None if it never does."""
    lo, hi = 0.0, 1.0
    if low_collusion_penalty(p.with_(c=lo)) <= 0:
        return 0.0
    if low_collusion_penalty(p.with_(c=1.0 - 1e-12)) > 0:
        return None
    # penalty is positive at 0 and negative near 1; bisect the sign change
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if low_collusion_penalty(p.with_(c=mid)) > 0:
            lo = mid
        else:
            hi = mid
    return hi
