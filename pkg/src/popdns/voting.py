"""Ballots, tallying and the exponentially weighted popularity ranking.

Each voting round ``m`` updates a record's weight as::

    w_m = alpha * n_m + (1 - alpha) * w_{m-1}

with ``w_{-1} = 0``. Membership of the list is the ``n_popular`` heaviest
records, ties broken by name (root-first, lexicographic) and then qtype.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .delta import RecordAdd, RecordRemove, UpdateBatch, apply_deltas
from .names import DomainName, RecordAnswer, RecordKey, check_ttl
from .poplist import CnameResolver, PopularityList, follow_chains

log = logging.getLogger(__name__)

Vote = RecordKey

EPSILON_DROP = 1e-6


@dataclass(frozen=True)
class Ballot:
    votes: tuple[RecordKey, ...] = ()

    def __post_init__(self):
        votes = tuple(self.votes)
        if len(set(votes)) != len(votes):
            raise ValueError("ballot contains duplicate votes")
        object.__setattr__(self, "votes", votes)

    def __len__(self) -> int:
        return len(self.votes)

    def __iter__(self):
        return iter(self.votes)


@dataclass(frozen=True)
class RoundConfig:
    t_refresh: int = 3600
    v_max: int = 10
    p_vote: float = 0.3
    alpha: float = 0.1
    n_popular: int = 25_000
    epsilon_drop: float = EPSILON_DROP

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 <= self.p_vote <= 1:
            raise ValueError("p_vote must lie in [0, 1]")
        if self.v_max < 1 or self.n_popular < 1 or self.t_refresh < 1:
            raise ValueError("v_max, n_popular and t_refresh must be positive")


# -- ballots -----------------------------------------------------------------

def generate_ballot(history: Sequence[RecordKey], config: RoundConfig,
                    rng: np.random.Generator) -> Ballot:
    """Each query in ``history`` (time order) is picked with probability
    ``p_vote``; picks are deduplicated and the first ``v_max`` kept."""
    if not len(history):
        return Ballot()
    picked = rng.random(len(history)) < config.p_vote
    votes: dict[RecordKey, None] = {}
    for key, hit in zip(history, picked):
        if hit and key not in votes:
            votes[key] = None
            if len(votes) == config.v_max:
                break
    return Ballot(tuple(votes))


def select_ballots(clients: np.ndarray, keys: np.ndarray, config: RoundConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`generate_ballot` over many clients at once.

    ``clients``/``keys`` are parallel integer arrays of queries in time order.
    Returns parallel ``(client, key)`` arrays, grouped by client, each
    client's votes in first-selection order.
    """
    picked = rng.random(len(keys)) < config.p_vote
    return ballots_from_picks(clients[picked], keys[picked], config.v_max)


def ballots_from_picks(clients: np.ndarray, keys: np.ndarray, v_max: int):
    if not len(keys):
        return clients[:0], keys[:0]
    order = np.argsort(clients, kind="stable")
    c = clients[order].astype(np.int64)
    k = keys[order].astype(np.int64)
    pair = c * (int(k.max()) + 1) + k
    _, first = np.unique(pair, return_index=True)
    keep = np.zeros(len(pair), dtype=bool)
    keep[first] = True
    c, k = c[keep], k[keep]
    starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
    sizes = np.diff(np.r_[starts, len(c)])
    rank = np.arange(len(c)) - np.repeat(starts, sizes)
    keep = rank < v_max
    return c[keep], k[keep]


def tally(ballots: Iterable[Ballot], v_max: int = 10,
          rejected: list | None = None) -> Counter:
    """Count, per record, how many accepted ballots name it.

    Ballots over ``v_max`` are rejected whole (appended to ``rejected`` when
    given) and the rest still counted.
    """
    counts: Counter = Counter()
    for ballot in ballots:
        if len(ballot) > v_max:
            log.warning("rejecting ballot with %d votes (quota %d)", len(ballot), v_max)
            if rejected is not None:
                rejected.append(ballot)
            continue
        counts.update(ballot.votes)
    return counts


# -- weights -----------------------------------------------------------------

class WeightTable:
    """Record -> weight mapping, numpy backed.

    Weights are stored relative to a shared decay scale so a round costs one
    vector operation instead of a pass over every key.
    """

    def __init__(self, alpha: float = 0.1, epsilon_drop: float = EPSILON_DROP):
        self.alpha = alpha
        self.epsilon_drop = epsilon_drop
        self.round_index = -1
        self._keys: list[RecordKey] = []
        self._slot: dict[RecordKey, int] = {}
        self._stored = np.zeros(0)
        self._live = np.zeros(0, dtype=bool)
        self._scale = 1.0

    @classmethod
    def for_config(cls, config: RoundConfig) -> "WeightTable":
        return cls(config.alpha, config.epsilon_drop)

    # mapping protocol over live keys
    def __len__(self) -> int:
        return int(self._live.sum())

    def __contains__(self, key) -> bool:
        slot = self._slot.get(key)
        return slot is not None and bool(self._live[slot])

    def __getitem__(self, key: RecordKey) -> float:
        slot = self._slot.get(key)
        if slot is None or not self._live[slot]:
            raise KeyError(key)
        return float(self._stored[slot] * self._scale)

    def get(self, key: RecordKey, default: float = 0.0) -> float:
        try:
            return self[key]
        except KeyError:
            return default

    def items(self):
        w = self.weights()
        for slot in np.flatnonzero(self._live):
            yield self._keys[slot], float(w[slot])

    def as_dict(self) -> dict[RecordKey, float]:
        return dict(self.items())

    def weights(self) -> np.ndarray:
        """Weights indexed by slot (0 for evicted/unseen slots)."""
        return self._stored * self._scale

    @property
    def keys(self) -> list[RecordKey]:
        return self._keys

    def copy(self) -> "WeightTable":
        new = WeightTable(self.alpha, self.epsilon_drop)
        new.round_index = self.round_index
        new._keys = list(self._keys)
        new._slot = dict(self._slot)
        new._stored = self._stored.copy()
        new._live = self._live.copy()
        new._scale = self._scale
        return new

    def register(self, keys: Iterable[RecordKey]) -> np.ndarray:
        """Slots for ``keys``, allocating new (weightless) slots as needed."""
        out = []
        for key in keys:
            slot = self._slot.get(key)
            if slot is None:
                slot = self._slot[key] = len(self._keys)
                self._keys.append(key)
            out.append(slot)
        if len(self._keys) > len(self._stored):
            grow = len(self._keys) - len(self._stored)
            self._stored = np.concatenate([self._stored, np.zeros(grow)])
            self._live = np.concatenate([self._live, np.zeros(grow, dtype=bool)])
        return np.asarray(out, dtype=np.int64)

    def step(self, counts: Mapping[RecordKey, int]) -> "WeightTable":
        """One voting round, in place."""
        keys = [k for k, n in counts.items() if n]
        slots = self.register(keys)
        return self.step_slots(slots, np.array([counts[k] for k in keys], dtype=float))

    def step_slots(self, slots: np.ndarray, counts: np.ndarray) -> "WeightTable":
        if np.any(counts < 0):
            raise ValueError("vote counts must be non-negative")
        self._scale *= 1.0 - self.alpha
        if self._scale < 1e-150:
            self._stored *= self._scale
            self._scale = 1.0
        np.add.at(self._stored, slots, self.alpha * counts / self._scale)
        self._live[slots[counts > 0]] = True
        w = self._stored * self._scale
        drop = self._live & (w < self.epsilon_drop)
        self._live[drop] = False
        self._stored[drop] = 0.0
        self.round_index += 1
        return self

    def top_slots(self, n: int) -> np.ndarray:
        """Slots of the ``n`` heaviest live keys (unordered), ties by key."""
        live = np.flatnonzero(self._live)
        if n >= len(live):
            return live
        w = self._stored[live] * self._scale
        kth = np.partition(w, len(w) - n)[len(w) - n]
        above = live[w > kth]
        tied = live[w == kth]
        need = n - len(above)
        if need < len(tied):
            keys = self._keys
            tied = np.array(sorted(tied.tolist(), key=lambda s: keys[s].sort_key)[:need],
                            dtype=np.int64)
        return np.concatenate([above, tied])

    def top(self, n: int) -> list[RecordKey]:
        """The ``n`` heaviest keys, heaviest first, ties by key."""
        slots = self.top_slots(n)
        w = self.weights()
        keys = self._keys
        return [keys[s] for s in sorted(slots.tolist(), key=lambda s: (-w[s], keys[s].sort_key))]


def update_weights(table: WeightTable, counts: Mapping[RecordKey, int],
                   config: RoundConfig | None = None) -> WeightTable:
    new = table.copy()
    if config is not None:
        new.alpha, new.epsilon_drop = config.alpha, config.epsilon_drop
    return new.step(counts)


def bootstrap_weights(day_one: Iterable[RecordKey], config: RoundConfig) -> WeightTable:
    """Day-one query counts become round 0: ``w_0 = alpha * count``."""
    counts = Counter(day_one)
    if not counts:
        raise ValueError("bootstrap needs at least one query")
    return WeightTable.for_config(config).step(counts)


# -- list refresh ------------------------------------------------------------

def _sort_key(key: RecordKey) -> tuple:
    return key.sort_key


def plan_refresh(table: WeightTable, current: PopularityList, cname_resolver: CnameResolver,
                 config: RoundConfig, members: Iterable[RecordKey] | None = None,
                 ) -> UpdateBatch:
    """Deltas moving ``current`` to the top-``n_popular`` membership.

    Records that stay keep their order and answer; newcomers are resolved
    through ``cname_resolver`` (skipped if it returns None); CNAME support
    records are recomputed. ``members`` overrides the table ranking.
    """
    if members is None:
        slots = table.top_slots(config.n_popular)
        members = [table.keys[s] for s in np.sort(slots)]
    orders = current._orders
    entries = current._entries
    pool = current.pool
    member_set = set(members)
    fresh: dict[RecordKey, tuple[RecordAnswer, int]] = {}
    for key in sorted(member_set.difference(orders), key=_sort_key):
        res = cname_resolver(key)
        if res is None:
            log.debug("skipping %s: upstream gave no answer", key)
            continue
        fresh[key] = (res[0], check_ttl(res[1]))

    def member_answer(key: RecordKey) -> RecordAnswer | None:
        if key not in member_set:
            return None
        if key in fresh:
            return fresh[key][0]
        order = orders.get(key)
        return None if order is None else pool[entries[order].answer]

    def resolve(key: RecordKey):
        order = orders.get(key)
        if order is not None:
            e = entries[order]
            return pool[e.answer], e.ttl
        return cname_resolver(key)

    # only alias records can pull in support; scan answers, not keys
    heads = [(e.key, pool[e.answer]) for e in entries.values()
             if type(pool[e.answer]) is DomainName and e.key in member_set]
    heads += [(k, a) for k, (a, _) in fresh.items() if type(a) is DomainName]
    support, _ = follow_chains(heads, member_answer, resolve)

    removes = []
    flipped = []
    for key in orders.keys() - member_set:
        e = entries[orders[key]]
        if e.is_cname_support and key in support:
            continue
        removes.append(e.order)
    for e in [e for e in entries.values() if e.is_cname_support]:
        if e.key in member_set:
            removes.append(e.order)
            flipped.append(e.key)
    removes.sort()
    adds = []
    newcomers = sorted(list(fresh) + flipped, key=_sort_key)
    for key in newcomers:
        if key in fresh:
            answer, ttl = fresh[key]
        else:
            e = entries[orders[key]]
            answer, ttl = pool[e.answer], e.ttl
        adds.append(_add_delta(current, key, answer, ttl, False))
    for key, (answer, ttl) in support.items():
        if key in member_set:
            continue
        order = orders.get(key)
        if order is not None and entries[order].is_cname_support:
            continue
        adds.append(_add_delta(current, key, answer, ttl, True))
    return UpdateBatch.next(current, [RecordRemove(o) for o in removes] + adds)


def refresh_list(table: WeightTable, current: PopularityList, cname_resolver: CnameResolver,
                 config: RoundConfig, inplace: bool = False,
                 members: Iterable[RecordKey] | None = None,
                 ) -> tuple[PopularityList, UpdateBatch]:
    """:func:`plan_refresh` then apply; returns ``(new_list, batch)``."""
    batch = plan_refresh(table, current, cname_resolver, config, members)
    target = current if inplace else current.copy()
    return apply_deltas(target, batch), batch


def _add_delta(plist: PopularityList, key, answer, ttl, support) -> RecordAdd:
    idx = plist.pool_index(answer)
    return RecordAdd(key, answer if idx is None else idx, ttl, support)


# -- estimator ---------------------------------------------------------------

def check_keys(X) -> list[RecordKey]:
    """Coerce query input to RecordKeys.

    Accepts RecordKeys, ``(name, qtype)`` pairs, or ``"name"`` / ``"name/TYPE"``
    strings.
    """
    if isinstance(X, (str, RecordKey)):
        raise ValueError("expected a sequence of queries, got a single query")
    out = []
    for item in X:
        if isinstance(item, RecordKey):
            out.append(item)
        elif isinstance(item, str):
            name, _, qtype = item.partition("/")
            out.append(RecordKey.of(name, qtype or "A"))
        elif isinstance(item, Ballot):
            out.extend(item.votes)
        else:
            name, qtype = item
            out.append(RecordKey.of(name, qtype) if isinstance(name, str) else RecordKey(name, qtype))
    return out


class PopularityVoter(BaseEstimator):
    """Estimator view of the voted popularity ranking.

    ``fit`` bootstraps weights from day-one queries, ``partial_fit`` applies
    one round of anonymised votes, ``predict`` says whether each query would
    be answered from the list and ``score`` is the resulting hit ratio.
    """

    def __init__(self, n_popular: int = 25_000, alpha: float = 0.1, v_max: int = 10,
                 p_vote: float = 0.3, epsilon_drop: float = EPSILON_DROP):
        self.n_popular = n_popular
        self.alpha = alpha
        self.v_max = v_max
        self.p_vote = p_vote
        self.epsilon_drop = epsilon_drop

    def _config(self) -> RoundConfig:
        return RoundConfig(v_max=self.v_max, p_vote=self.p_vote, alpha=self.alpha,
                           n_popular=self.n_popular, epsilon_drop=self.epsilon_drop)

    def _refresh_members(self):
        self.members_ = frozenset(self.table_.top(self.n_popular))
        self.n_rounds_ = self.table_.round_index + 1

    def fit(self, X, y=None):
        self.table_ = bootstrap_weights(check_keys(X), self._config())
        self._refresh_members()
        return self

    def partial_fit(self, X, y=None):
        votes = check_keys(X)
        if not hasattr(self, "table_"):
            self.table_ = WeightTable.for_config(self._config())
        self.table_.step(Counter(votes))
        self._refresh_members()
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "members_")
        members = self.members_
        return np.fromiter((k in members for k in check_keys(X)), dtype=bool)

    def score(self, X, y=None) -> float:
        hits = self.predict(X)
        return float(hits.mean()) if len(hits) else 0.0

    def generate_ballot(self, history, random_state=None) -> Ballot:
        rng = np.random.default_rng(random_state)
        return generate_ballot(check_keys(history), self._config(), rng)
