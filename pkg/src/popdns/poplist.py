"""The Popularity List: trie-indexed popular records plus an answer pool.

Entries are addressed by ``order`` (their stable order of appearance) and
answers by their position in the append-only pool, which is what keeps the
incremental update messages in :mod:`popdns.delta` small.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, NamedTuple, Optional

from .errors import (
    BadMagic,
    DanglingPoolIndex,
    DecompressionError,
    SnapshotError,
    TruncatedData,
    UnsupportedVersion,
)
from .names import DomainName, QType, RecordAnswer, RecordKey, answer_matches, check_ttl
from .wire import Reader, encode_answer, encode_varint, unzigzag, zigzag

MAX_CHAIN = 8
SNAPSHOT_MAGIC = b"PLS1"
FLAG_SUPPORT = 0x01
FLAG_EXPLICIT_ORDER = 0x02  # entry carries its order; only written for non-canonical lists

CnameResolver = Callable[[RecordKey], Optional[tuple[RecordAnswer, int]]]


class ListEntry(NamedTuple):
    key: RecordKey
    answer: int  # pool index
    ttl: int
    order: int
    is_cname_support: bool = False


@dataclass(frozen=True)
class Hit:
    chain: tuple[tuple[RecordKey, RecordAnswer], ...]

    def __bool__(self) -> bool:
        return True

    @property
    def answer(self) -> RecordAnswer:
        return self.chain[-1][1]


class Miss:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return "MISS"


MISS = Miss()
LookupResult = Hit | Miss


class _Node:
    __slots__ = ("children", "entries")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.entries: dict[QType, int] = {}

    def clone(self) -> "_Node":
        node = _Node()
        node.entries = dict(self.entries)
        node.children = {lbl: child.clone() for lbl, child in self.children.items()}
        return node


class PopularityList:
    """Replicated list state. Treat as a value: use :meth:`copy` before mutating."""

    def __init__(self, version: int = 0):
        self.version = version
        self.pool: list[RecordAnswer] = []
        self._pool_index: dict[RecordAnswer, int] = {}
        self._entries: dict[int, ListEntry] = {}
        self._orders: dict[RecordKey, int] = {}  # key index alongside the trie
        self._root = _Node()
        self._max_order = -1
        self.diagnostics: list[str] = []

    # -- read side -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ListEntry]:
        for order in sorted(self._entries):
            yield self._entries[order]

    @property
    def entries(self) -> list[ListEntry]:
        return list(self)

    def __contains__(self, key: RecordKey) -> bool:
        return self.order_of(key) is not None

    def __eq__(self, other) -> bool:
        if not isinstance(other, PopularityList):
            return NotImplemented
        return (
            self.version == other.version
            and self.pool == other.pool
            and self._entries == other._entries
        )

    def __repr__(self) -> str:
        return f"PopularityList(version={self.version}, entries={len(self)}, pool={len(self.pool)})"

    def _node_for(self, name: DomainName, create: bool = False) -> _Node | None:
        node = self._root
        for lbl in name.labels:
            nxt = node.children.get(lbl)
            if nxt is None:
                if not create:
                    return None
                nxt = node.children[lbl] = _Node()
            node = nxt
        return node

    def order_of(self, key: RecordKey) -> int | None:
        return self._orders.get(key)

    def get(self, key: RecordKey) -> ListEntry | None:
        order = self._orders.get(key)
        return None if order is None else self._entries[order]

    def entry_at(self, order: int) -> ListEntry | None:
        return self._entries.get(order)

    def answer_of(self, entry: ListEntry) -> RecordAnswer:
        return self.pool[entry.answer]

    def popular_count(self) -> int:
        return sum(1 for e in self._entries.values() if not e.is_cname_support)

    @property
    def max_order(self) -> int:
        return self._max_order

    def lookup(self, key: RecordKey) -> LookupResult:
        chain = []
        seen = set()
        qtype = key.qtype
        while len(chain) < MAX_CHAIN:
            if key in seen:
                return MISS
            seen.add(key)
            entry = self.get(key)
            if entry is None:
                return MISS
            answer = self.pool[entry.answer]
            chain.append((key, answer))
            if answer_matches(answer, qtype):
                return Hit(tuple(chain))
            if not isinstance(answer, DomainName):
                return MISS
            key = RecordKey(answer, qtype)
        return MISS

    def preorder(self) -> Iterator[ListEntry]:
        """Entries in trie pre-order: a node's own records, then children by label."""
        stack = [self._root]
        while stack:
            node = stack.pop()
            for qtype in sorted(node.entries):
                yield self._entries[node.entries[qtype]]
            for lbl in sorted(node.children, reverse=True):
                stack.append(node.children[lbl])

    def is_canonical(self) -> bool:
        return all(e.order == i for i, e in enumerate(self.preorder()))

    def digest(self) -> str:
        return hashlib.sha256(serialize_snapshot(self)).hexdigest()

    # -- write side ------------------------------------------------------

    def copy(self) -> "PopularityList":
        new = PopularityList(self.version)
        new.pool = list(self.pool)
        new._pool_index = dict(self._pool_index)
        new._entries = dict(self._entries)
        new._orders = dict(self._orders)
        new._root = self._root.clone()
        new._max_order = self._max_order
        return new

    def intern(self, answer: RecordAnswer) -> int:
        idx = self._pool_index.get(answer)
        if idx is None:
            idx = len(self.pool)
            self.pool.append(answer)
            self._pool_index[answer] = idx
        return idx

    def pool_index(self, answer: RecordAnswer) -> int | None:
        return self._pool_index.get(answer)

    def _add(self, key: RecordKey, answer: int, ttl: int, support: bool = False,
             order: int | None = None) -> int:
        if answer >= len(self.pool) or answer < 0:
            raise IndexError(f"pool index {answer} out of range")
        if order is None:
            order = self._max_order + 1
        elif order in self._entries:
            raise KeyError(f"order {order} already taken")
        if key in self._orders:
            raise KeyError(f"{key} already present")
        node = self._node_for(key.name, create=True)
        node.entries[key.qtype] = order
        self._orders[key] = order
        self._entries[order] = ListEntry(key, answer, ttl, order, support)
        if order > self._max_order:
            self._max_order = order
        return order

    def _remove(self, order: int) -> ListEntry:
        entry = self._entries.pop(order)
        del self._orders[entry.key]
        path = [self._root]
        for lbl in entry.key.name.labels:
            path.append(path[-1].children[lbl])
        del path[-1].entries[entry.key.qtype]
        # prune empty branches so trie and entries stay in step
        for depth in range(len(path) - 1, 0, -1):
            node = path[depth]
            if node.entries or node.children:
                break
            del path[depth - 1].children[entry.key.name.labels[depth - 1]]
        if order == self._max_order:
            self._max_order = max(self._entries, default=-1)
        return entry

    def _replace(self, entry: ListEntry) -> None:
        self._entries[entry.order] = entry

    def compacted(self) -> "PopularityList":
        """Copy with orders renumbered densely in trie pre-order (fresh snapshot epoch)."""
        new = PopularityList(self.version)
        new.pool = list(self.pool)
        new._pool_index = dict(self._pool_index)
        for i, e in enumerate(list(self.preorder())):
            new._add(e.key, e.answer, e.ttl, e.is_cname_support, order=i)
        return new


def pool_intern(plist: PopularityList, answer: RecordAnswer) -> int:
    return plist.intern(answer)


def lookup(plist: PopularityList, key: RecordKey) -> LookupResult:
    return plist.lookup(key)


# -- building ----------------------------------------------------------------

def follow_chains(
    heads: Iterable[tuple[RecordKey, RecordAnswer]],
    present: Callable[[RecordKey], Optional[RecordAnswer]],
    resolve: CnameResolver,
) -> tuple[dict[RecordKey, tuple[RecordAnswer, int]], list[str]]:
    """Collect intermediate CNAME records needed by ``heads``.

    ``present`` answers for keys already in the list; everything else goes to
    ``resolve``. Returns newly required records in discovery order plus
    diagnostics for chains that were cut (too long, cyclic or unresolvable).
    """
    support: dict[RecordKey, tuple[RecordAnswer, int]] = {}
    diagnostics: list[str] = []
    for head, answer in heads:
        if head.qtype is QType.CNAME or not isinstance(answer, DomainName):
            continue
        seen = {head}
        length = 1
        target = answer
        while True:
            key = RecordKey(target, head.qtype)
            if key in seen:
                diagnostics.append(f"cname cycle: {head} -> {key}")
                break
            if length >= MAX_CHAIN:
                diagnostics.append(f"cname chain from {head} longer than {MAX_CHAIN}, cut at {key}")
                break
            if key in support:
                nxt = support[key][0]
            else:
                nxt = present(key)
                if nxt is None:
                    res = resolve(key)
                    if res is None:
                        diagnostics.append(f"cname target {key} did not resolve (chain from {head})")
                        break
                    nxt, ttl = res
                    support[key] = (nxt, check_ttl(ttl))
            seen.add(key)
            length += 1
            if not isinstance(nxt, DomainName):
                break
            target = nxt
    return support, diagnostics


def build_list(
    ranked: Iterable[tuple[RecordKey, RecordAnswer, int]],
    cname_resolver: CnameResolver,
    n_popular: int,
) -> PopularityList:
    """Build a list from records sorted by descending popularity.

    The first ``n_popular`` records get ``order = rank``; intermediate CNAME
    records follow as support entries. Chain problems are recorded in
    ``diagnostics`` instead of raising.
    """
    plist = PopularityList()
    popular: dict[RecordKey, RecordAnswer] = {}
    for rank, (key, answer, ttl) in enumerate(ranked):
        if rank >= n_popular:
            break
        if key in popular:
            raise ValueError(f"duplicate key {key} in ranked input")
        popular[key] = answer
        plist._add(key, plist.intern(answer), check_ttl(ttl))
    support, diagnostics = follow_chains(popular.items(), popular.get, cname_resolver)
    for key, (answer, ttl) in support.items():
        plist._add(key, plist.intern(answer), ttl, support=True)
    plist.diagnostics = diagnostics
    return plist


# -- snapshot wire format ----------------------------------------------------

def _deflate(body: bytes) -> bytes:
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    return comp.compress(body) + comp.flush()


def _inflate(data: bytes, truncated: type[Exception], broken: type[Exception]) -> bytes:
    dec = zlib.decompressobj(-15)
    try:
        body = dec.decompress(data) + dec.flush()
    except zlib.error as exc:
        raise broken(f"deflate stream is corrupt: {exc}") from None
    if not dec.eof:
        raise truncated("deflate stream ended early")
    return body


def serialize_snapshot(plist: PopularityList) -> bytes:
    canonical = plist.is_canonical()
    out = bytearray()
    out += encode_varint(len(plist.pool))
    for answer in plist.pool:
        out += encode_answer(answer)
    entries = plist._entries

    def emit(label: str, node: _Node) -> None:
        raw = label.encode("ascii")
        out.extend(encode_varint(len(raw)))
        out.extend(raw)
        out.extend(encode_varint(len(node.entries)))
        for qtype in sorted(node.entries):
            e = entries[node.entries[qtype]]
            flags = FLAG_SUPPORT if e.is_cname_support else 0
            if not canonical:
                flags |= FLAG_EXPLICIT_ORDER
            out.append(qtype)
            out.append(flags)
            if not canonical:
                out.extend(encode_varint(e.order))
            # pool indices grow with orders as records are interned, so the gap is small
            out.extend(encode_varint(zigzag(e.answer - e.order)))
            out.extend(encode_varint(e.ttl))
        out.extend(encode_varint(len(node.children)))
        for lbl in sorted(node.children):
            emit(lbl, node.children[lbl])

    emit("", plist._root)
    return SNAPSHOT_MAGIC + struct.pack("<Q", plist.version) + _deflate(bytes(out))


def parse_snapshot(data: bytes) -> PopularityList:
    if len(data) < 4:
        raise TruncatedData("snapshot shorter than its magic")
    magic = bytes(data[:4])
    if magic != SNAPSHOT_MAGIC:
        if magic[:3] == SNAPSHOT_MAGIC[:3]:
            raise UnsupportedVersion(f"snapshot format {magic[3:]!r} not supported")
        raise BadMagic(f"bad snapshot magic {magic!r}")
    if len(data) < 12:
        raise TruncatedData("snapshot header truncated")
    version = struct.unpack_from("<Q", data, 4)[0]
    body = _inflate(bytes(data[12:]), TruncatedData, DecompressionError)

    rd = Reader(body)
    plist = PopularityList(version)
    for _ in range(rd.varint()):
        plist.intern(rd.answer())
    counter = 0

    def walk(labels: tuple[str, ...] | None) -> None:
        nonlocal counter
        n = rd.varint()
        label = rd.take(n).decode("ascii", errors="replace")
        if labels is None:
            if n:
                raise SnapshotError("root node carries a label")
            labels = ()
        elif not n:
            raise SnapshotError("empty label below the root")
        else:
            labels = labels + (label,)
        for _ in range(rd.varint()):
            try:
                qtype = QType(rd.u8())
            except ValueError as exc:
                raise SnapshotError(str(exc)) from None
            flags = rd.u8()
            order = rd.varint() if flags & FLAG_EXPLICIT_ORDER else counter
            counter += 1
            answer = order + unzigzag(rd.varint())
            ttl = rd.varint()
            if not 0 <= answer < len(plist.pool):
                raise DanglingPoolIndex(f"pool index {answer} outside pool of {len(plist.pool)}")
            try:
                key = RecordKey(DomainName(labels), qtype)
                plist._add(key, answer, check_ttl(ttl), bool(flags & FLAG_SUPPORT), order=order)
            except (ValueError, KeyError) as exc:
                raise SnapshotError(f"bad entry: {exc}") from None
        for _ in range(rd.varint()):
            walk(labels)

    walk(None)
    if not rd.at_end():
        raise SnapshotError("trailing bytes after tree section")
    return plist


def serialize_flat(plist: PopularityList) -> bytes:
    """Line-per-record text form (``name qtype answer ttl``), deflated.

    Baseline for measuring what the trie layout saves.
    """
    lines = []
    for e in plist:
        lines.append(f"{e.key.name} {e.key.qtype.name} {plist.pool[e.answer]} {e.ttl}\n")
    return _deflate("".join(lines).encode("ascii"))
