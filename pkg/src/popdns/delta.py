"""Incremental Popularity List updates.

A record is referenced by its order of appearance in the list and a new
answer, when already pooled, by a signed offset from the record's current
pool index (zigzag varint; wire value 0 escapes to a literal answer).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address
from typing import Callable, Iterable, Sequence, Union

from .errors import DanglingReference, DeltaError, MalformedDelta, VersionGap
from .names import DomainName, QType, RecordAnswer, RecordKey, check_ttl
from .poplist import ListEntry, PopularityList, _deflate, _inflate, parse_snapshot
from .wire import delta_reader, encode_answer, encode_key, encode_varint, unzigzag, zigzag

BATCH_MAGIC = b"PLU1"
DEFAULT_TTL_MIN = 60

TAG_ANSWER, TAG_ADD, TAG_REMOVE, TAG_TTL = 0, 1, 2, 3


@dataclass(frozen=True)
class PoolRelative:
    offset: int

    def __post_init__(self):
        if self.offset == 0:
            raise ValueError("offset 0 is reserved for the literal escape")


@dataclass(frozen=True)
class Literal:
    answer: RecordAnswer


RelRef = Union[PoolRelative, Literal]


@dataclass(frozen=True)
class AnswerChange:
    record_order: int
    ref: RelRef


@dataclass(frozen=True)
class RecordAdd:
    key: RecordKey
    answer: Union[RecordAnswer, int]  # literal answer, or an index into the pool
    ttl: int
    is_cname_support: bool = False


@dataclass(frozen=True)
class RecordRemove:
    record_order: int


@dataclass(frozen=True)
class TtlChange:
    record_order: int
    ttl: int


Delta = Union[AnswerChange, RecordAdd, RecordRemove, TtlChange]


@dataclass(frozen=True)
class UpdateBatch:
    from_version: int
    to_version: int
    deltas: tuple[Delta, ...] = ()

    def __post_init__(self):
        if self.to_version != self.from_version + 1:
            raise ValueError("a batch advances the version by exactly one")
        object.__setattr__(self, "deltas", tuple(self.deltas))

    @classmethod
    def next(cls, plist: PopularityList, deltas: Iterable[Delta] = ()) -> "UpdateBatch":
        return cls(plist.version, plist.version + 1, tuple(deltas))

    def __len__(self) -> int:
        return len(self.deltas)


_FITS = {
    QType.A: (IPv4Address, DomainName),
    QType.AAAA: (IPv6Address, DomainName),
    QType.CNAME: (DomainName,),
}


def _compatible(answer: RecordAnswer, key: RecordKey) -> bool:
    # an address of the queried family, or an alias to follow
    return type(answer) in _FITS[key.qtype]


# -- encoding ----------------------------------------------------------------

class _PoolView:
    """Tracks pool growth and per-record answers while walking a batch."""

    def __init__(self, plist: PopularityList):
        self.plist = plist
        self.size = len(plist.pool)
        self.extra: dict[RecordAnswer, int] = {}
        self.current: dict[int, int] = {}
        self.dead: set[int] = set()
        self._max_order: int | None = plist.max_order

    def index(self, answer: RecordAnswer) -> int | None:
        idx = self.plist.pool_index(answer)
        return idx if idx is not None else self.extra.get(answer)

    def intern(self, answer: RecordAnswer) -> int:
        idx = self.index(answer)
        if idx is None:
            idx = self.extra[answer] = self.size
            self.size += 1
        return idx

    def next_order(self) -> int:
        # same rule as PopularityList._add: max live order + 1
        if self._max_order is None:
            live = {o for o in self.plist._entries if o not in self.dead}
            live.update(o for o in self.current if o not in self.dead)
            self._max_order = max(live, default=-1)
        self._max_order += 1
        return self._max_order

    def remove(self, order: int) -> None:
        self.dead.add(order)
        self.current.pop(order, None)
        if order == self._max_order:
            self._max_order = None

    def answer_idx(self, order: int) -> int:
        if order in self.dead:
            raise DanglingReference(f"record {order} was removed")
        idx = self.current.get(order)
        if idx is None:
            entry = self.plist.entry_at(order)
            if entry is None:
                raise DanglingReference(f"no live record at order {order}")
            idx = entry.answer
        return idx


def encode_batch(list_before: PopularityList, batch: UpdateBatch) -> bytes:
    """Serialize ``batch`` against the replica state it applies to."""
    if batch.from_version != list_before.version:
        raise VersionGap(list_before.version, batch.from_version)
    view = _PoolView(list_before)
    out = bytearray(encode_varint(len(batch.deltas)))
    entries = list_before._entries
    current, dead = view.current, view.dead
    for d in batch.deltas:
        if type(d) is AnswerChange:
            order = d.record_order
            cur = current.get(order)
            if cur is None:
                entry = entries.get(order)
                if entry is None or order in dead:
                    view.answer_idx(order)  # raises with the precise reason
                cur = entry.answer
            out.append(TAG_ANSWER)
            out += encode_varint(order)
            ref = d.ref
            if type(ref) is PoolRelative:
                target = cur + ref.offset
                if not 0 <= target < view.size:
                    raise DanglingReference(f"pool offset {ref.offset} from {cur} out of range")
                off = ref.offset
                out += encode_varint(off << 1 if off >= 0 else ((-off) << 1) - 1)
            else:
                target = view.intern(ref.answer)
                out.append(0)
                out += encode_answer(ref.answer)
            current[order] = target
        elif isinstance(d, RecordAdd):
            out.append(TAG_ADD)
            out += encode_key(d.key)
            if isinstance(d.answer, int):
                if not 0 <= d.answer < view.size:
                    raise DanglingReference(f"pool index {d.answer} out of range")
                out.append(0)
                out += encode_varint(d.answer)
                idx = d.answer
            else:
                out.append(1)
                out += encode_answer(d.answer)
                idx = view.intern(d.answer)
            out += encode_varint(check_ttl(d.ttl))
            out.append(1 if d.is_cname_support else 0)
            order = view.next_order()
            view.current[order] = idx
            view.dead.discard(order)
        elif isinstance(d, RecordRemove):
            view.answer_idx(d.record_order)
            view.remove(d.record_order)
            out.append(TAG_REMOVE)
            out += encode_varint(d.record_order)
        elif isinstance(d, TtlChange):
            view.answer_idx(d.record_order)
            out.append(TAG_TTL)
            out += encode_varint(d.record_order)
            out += encode_varint(check_ttl(d.ttl))
        else:
            raise TypeError(f"not a delta: {d!r}")
    header = BATCH_MAGIC + struct.pack("<QQ", batch.from_version, batch.to_version)
    return header + _deflate(bytes(out))


def decode_batch(data: bytes) -> UpdateBatch:
    if len(data) < 20 or bytes(data[:4]) != BATCH_MAGIC:
        raise MalformedDelta("not an update batch")
    from_v, to_v = struct.unpack_from("<QQ", data, 4)
    if to_v != from_v + 1:
        raise MalformedDelta(f"batch jumps from version {from_v} to {to_v}")
    body = _inflate(bytes(data[20:]), MalformedDelta, MalformedDelta)
    rd = delta_reader(body)
    deltas: list[Delta] = []
    for _ in range(rd.varint()):
        tag = rd.u8()
        if tag == TAG_ANSWER:
            order = rd.varint()
            z = rd.varint()
            ref = Literal(rd.answer()) if z == 0 else PoolRelative(unzigzag(z))
            deltas.append(AnswerChange(order, ref))
        elif tag == TAG_ADD:
            key = rd.key()
            flag = rd.u8()
            if flag == 0:
                answer: RecordAnswer | int = rd.varint()
            elif flag == 1:
                answer = rd.answer()
            else:
                raise MalformedDelta(f"bad answer flag {flag}")
            ttl = rd.varint()
            flags = rd.u8()
            if ttl < 1:
                raise MalformedDelta("TTL 0")
            deltas.append(RecordAdd(key, answer, ttl, bool(flags & 1)))
        elif tag == TAG_REMOVE:
            deltas.append(RecordRemove(rd.varint()))
        elif tag == TAG_TTL:
            order = rd.varint()
            ttl = rd.varint()
            if ttl < 1:
                raise MalformedDelta("TTL 0")
            deltas.append(TtlChange(order, ttl))
        else:
            raise MalformedDelta(f"unknown delta tag {tag}")
    if not rd.at_end():
        raise MalformedDelta("trailing bytes in batch body")
    return UpdateBatch(from_v, to_v, tuple(deltas))


# -- applying ----------------------------------------------------------------

def apply_deltas(plist: PopularityList, batch: UpdateBatch) -> PopularityList:
    """Apply a decoded batch to ``plist`` in place and return it."""
    if batch.from_version != plist.version:
        raise VersionGap(plist.version, batch.from_version)
    entries = plist._entries
    pool = plist.pool
    for d in batch.deltas:
        if type(d) is AnswerChange:
            entry = entries.get(d.record_order)
            if entry is None:
                raise DanglingReference(f"no live record at order {d.record_order}")
            ref = d.ref
            if type(ref) is PoolRelative:
                idx = entry.answer + ref.offset
                if not 0 <= idx < len(pool):
                    raise DanglingReference(f"pool index {idx} out of range")
                answer = pool[idx]
            else:
                answer = ref.answer
                idx = plist.intern(answer)
            if type(answer) not in _FITS[entry.key.qtype]:
                raise MalformedDelta(f"answer {answer} does not fit {entry.key}")
            entries[d.record_order] = ListEntry(entry.key, idx, entry.ttl, entry.order,
                                                entry.is_cname_support)
        elif isinstance(d, RecordAdd):
            if isinstance(d.answer, int):
                if not 0 <= d.answer < len(plist.pool):
                    raise DanglingReference(f"pool index {d.answer} out of range")
                idx = d.answer
            else:
                idx = plist.intern(d.answer)
            if not _compatible(plist.pool[idx], d.key):
                raise MalformedDelta(f"answer {plist.pool[idx]} does not fit {d.key}")
            try:
                plist._add(d.key, idx, check_ttl(d.ttl), d.is_cname_support)
            except KeyError as exc:
                raise MalformedDelta(str(exc)) from None
        elif isinstance(d, RecordRemove):
            if d.record_order not in entries:
                raise DanglingReference(f"no live record at order {d.record_order}")
            plist._remove(d.record_order)
        elif isinstance(d, TtlChange):
            entry = entries.get(d.record_order)
            if entry is None:
                raise DanglingReference(f"no live record at order {d.record_order}")
            entries[d.record_order] = entry._replace(ttl=check_ttl(d.ttl))
        else:
            raise TypeError(f"not a delta: {d!r}")
    plist.version = batch.to_version
    return plist


def apply_batch(plist: PopularityList, data: bytes, inplace: bool = False) -> PopularityList:
    """Decode ``data`` and apply it. Returns a new list unless ``inplace``.

    A failed in-place apply can leave ``plist`` partially updated; refetch a
    snapshot in that case.
    """
    batch = decode_batch(data)
    if batch.from_version != plist.version:
        raise VersionGap(plist.version, batch.from_version)
    target = plist if inplace else plist.copy()
    return apply_deltas(target, batch)


class Replica:
    """A client's copy of the list, kept current from broadcast batches.

    A batch that does not follow the replica's version (lost or repeated
    broadcast) or fails to apply triggers a snapshot refetch through
    ``fetch_snapshot``.
    """

    def __init__(self, snapshot: bytes, fetch_snapshot: Callable[[], bytes]):
        self.list = parse_snapshot(snapshot)
        self.fetch_snapshot = fetch_snapshot
        self.refetches = 0

    @property
    def version(self) -> int:
        return self.list.version

    def receive(self, data: bytes) -> None:
        try:
            apply_batch(self.list, data, inplace=True)
        except DeltaError:  # includes VersionGap
            self.list = parse_snapshot(self.fetch_snapshot())
            self.refetches += 1


# -- diffing -----------------------------------------------------------------

def answer_ref(view_index: int | None, current: int, answer: RecordAnswer) -> RelRef:
    if view_index is None:
        return Literal(answer)
    return PoolRelative(view_index - current)


def diff_states(before: PopularityList, after: PopularityList) -> UpdateBatch:
    """Deltas turning ``before`` into a list with the same content as ``after``.

    Same-key records keep their order and get AnswerChange/TtlChange; a record
    whose support flag flips is removed and re-added.
    """
    view = _PoolView(before)
    removes: list[Delta] = []
    changes: list[Delta] = []
    adds: list[Delta] = []
    for e in before:
        a = after.get(e.key)
        if a is None or a.is_cname_support != e.is_cname_support:
            removes.append(RecordRemove(e.order))
            continue
        new_answer = after.pool[a.answer]
        if new_answer != before.pool[e.answer]:
            idx = view.index(new_answer)
            ref = answer_ref(idx, e.answer, new_answer)
            if idx is None:
                view.intern(new_answer)
            changes.append(AnswerChange(e.order, ref))
        if a.ttl != e.ttl:
            changes.append(TtlChange(e.order, a.ttl))
    for a in after:
        e = before.get(a.key)
        if e is not None and e.is_cname_support == a.is_cname_support:
            continue
        answer = after.pool[a.answer]
        idx = view.index(answer)
        if idx is None:
            view.intern(answer)
            adds.append(RecordAdd(a.key, answer, a.ttl, a.is_cname_support))
        else:
            adds.append(RecordAdd(a.key, idx, a.ttl, a.is_cname_support))
    return UpdateBatch.next(before, removes + changes + adds)


def literal_form(batch: UpdateBatch, plist: PopularityList) -> UpdateBatch:
    """Same batch with every pool reference spelled out as a literal answer."""
    view = _PoolView(plist)
    answers = {e.order: e.answer for e in plist}
    pool = list(plist.pool)
    out: list[Delta] = []
    for d in batch.deltas:
        if isinstance(d, AnswerChange):
            if isinstance(d.ref, PoolRelative):
                answer = pool[answers[d.record_order] + d.ref.offset]
            else:
                answer = d.ref.answer
            idx = view.intern(answer)
            if idx == len(pool):
                pool.append(answer)
            answers[d.record_order] = idx
            out.append(AnswerChange(d.record_order, Literal(answer)))
        elif isinstance(d, RecordAdd) and isinstance(d.answer, int):
            out.append(RecordAdd(d.key, pool[d.answer], d.ttl, d.is_cname_support))
        else:
            if isinstance(d, RecordAdd):
                idx = view.intern(d.answer)
                if idx == len(pool):
                    pool.append(d.answer)
            out.append(d)
    return UpdateBatch(batch.from_version, batch.to_version, tuple(out))


# -- scheduling --------------------------------------------------------------

@dataclass
class UpdateScheduler:
    """Accumulates deltas and releases at most one batch per ``ttl_min``."""

    ttl_min: int = DEFAULT_TTL_MIN
    pending: list[Delta] = field(default_factory=list)
    next_flush: float = 0.0

    def __post_init__(self):
        self.ttl_min = check_ttl(self.ttl_min)

    def requery_at(self, ttl: int, now: float) -> float:
        return now + max(ttl, self.ttl_min)

    def push(self, *deltas: Delta) -> None:
        self.pending.extend(deltas)

    def flush(self, plist: PopularityList, now: float) -> UpdateBatch | None:
        """Pop the pending deltas as a batch if the window has closed."""
        if now < self.next_flush:
            return None
        self.next_flush = now + self.ttl_min
        if not self.pending:
            return None
        batch = UpdateBatch.next(plist, self.pending)
        self.pending = []
        return batch


def schedule_requery(scheduler: UpdateScheduler, record: ListEntry, now: float) -> float:
    return scheduler.requery_at(record.ttl, now)


def measure_bandwidth(batches: Sequence[bytes], window: float) -> float:
    """Bytes per client per hour; every client receives every broadcast batch."""
    if window <= 0:
        raise ValueError("window must be positive")
    return sum(len(b) for b in batches) * 3600.0 / window
