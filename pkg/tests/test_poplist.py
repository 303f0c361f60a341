import ipaddress
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from popdns.errors import BadMagic, DanglingPoolIndex, TruncatedData, UnsupportedVersion
from popdns.names import DomainName, QType, RecordKey, parse_domain
from popdns.poplist import (
    MISS, PopularityList, build_list, lookup, parse_snapshot, pool_intern, serialize_flat,
    serialize_snapshot,
)
from popdns.sim.engine import synthetic_universe
from popdns.sim.trace import gen_trace
from popdns.sim.upstream import ChurnModel, Upstream
from popdns.wire import encode_varint

from .conftest import answer_for, names

IP = ipaddress.ip_address


def no_chains(_key):
    return None


def test_single_record():
    plist = build_list([(RecordKey.of("a.com"), IP("1.2.3.4"), 300)], no_chains, 1)
    assert len(plist) == 1
    assert plist.pool == [IP("1.2.3.4")]
    assert plist.get(RecordKey.of("a.com")).order == 0


def test_one_link_chain_adds_support():
    edge = parse_domain("edge.y.net")

    def resolver(key):
        return (IP("5.6.7.8"), 60) if key == RecordKey(edge, QType.A) else None

    plist = build_list([(RecordKey.of("cdn.x.com"), edge, 300)], resolver, 1)
    assert len(plist) == 2
    support = plist.get(RecordKey(edge, QType.A))
    assert support.is_cname_support and plist.pool[support.answer] == IP("5.6.7.8")
    assert plist.popular_count() == 1


def test_rank_beyond_n_popular_is_ignored():
    ranked = [(RecordKey.of(f"r{i}.com"), IP(f"10.0.0.{i}"), 60) for i in range(5)]
    plist = build_list(ranked, no_chains, 3)
    assert [e.order for e in plist] == [0, 1, 2]
    assert RecordKey.of("r3.com") not in plist


def test_cycles_and_long_chains_are_diagnosed_not_raised():
    a, b = parse_domain("a.x"), parse_domain("b.x")
    answers = {RecordKey(a, QType.A): (b, 60), RecordKey(b, QType.A): (a, 60)}
    plist = build_list([(RecordKey(a, QType.A), b, 60)], answers.get, 1)
    assert any("cycle" in d for d in plist.diagnostics)
    assert lookup(plist, RecordKey(a, QType.A)) is MISS

    chain = {RecordKey(parse_domain(f"c{i}.x"), QType.A): (parse_domain(f"c{i + 1}.x"), 60)
             for i in range(20)}
    head = RecordKey(parse_domain("c0.x"), QType.A)
    plist = build_list([(head, chain[head][0], 60)], chain.get, 1)
    assert any("longer" in d for d in plist.diagnostics)
    assert len(plist) <= 8


def test_synthetic_entry_and_pool_counts():
    keys = synthetic_universe(10_000)
    up = Upstream(keys, ChurnModel(seed=3))
    ranked = [(k, *up.resolve(k)) for k in keys]
    plist = build_list(ranked, up.resolve, 10_000)
    # brute force: alias targets that are not already popular become support entries
    popular = set(keys)
    targets = {RecordKey(a, k.qtype) for k, a, _ in ranked if isinstance(a, DomainName)}
    assert len(plist) == 10_000 + len(targets - popular)
    answers = {a for _, a, _ in ranked} | {up.resolve(t)[0] for t in targets - popular}
    assert len(plist.pool) == len(answers)


def test_lookup_cases():
    edge = parse_domain("edge.y.net")
    plist = build_list([
        (RecordKey.of("a.com"), IP("1.2.3.4"), 60),
        (RecordKey.of("cdn.x.com"), edge, 60),
    ], lambda k: (IP("5.6.7.8"), 60) if k.name == edge else None, 2)
    hit = lookup(plist, RecordKey.of("a.com"))
    assert hit and len(hit.chain) == 1 and hit.answer == IP("1.2.3.4")
    hit = lookup(plist, RecordKey.of("cdn.x.com"))
    assert hit and len(hit.chain) == 2 and hit.answer == IP("5.6.7.8")
    assert lookup(plist, RecordKey.of("b.com")) is MISS
    assert lookup(plist, RecordKey.of("a.com", "AAAA")) is MISS


def test_empty_snapshot_roundtrip():
    data = serialize_snapshot(PopularityList())
    assert data[:4] == b"PLS1"
    assert parse_snapshot(data) == PopularityList()


def _tree_section(data):
    return zlib.decompress(data[12:], -15)


def test_trie_stores_shared_labels_once():
    plist = build_list([(RecordKey.of("example.com"), IP("1.1.1.1"), 60),
                        (RecordKey.of("mail.example.com"), IP("2.2.2.2"), 60)], no_chains, 2)
    body = _tree_section(serialize_snapshot(plist))
    for label in (b"com", b"example", b"mail"):
        assert body.count(label) == 1


def test_trie_beats_flat_text():
    trace = gen_trace(500, 24 * 3600, 40, 1.0, 1_000_000, seed=5)
    counts = np.bincount(trace.key_id)
    top = np.argsort(-counts, kind="stable")[:25_000]
    assert len(top) == 25_000
    up = Upstream(trace.keys)
    plist = build_list([(trace.keys[i], *up.resolve(trace.keys[i])) for i in top.tolist()], up.resolve,
                       25_000)
    assert len(serialize_snapshot(plist)) < len(serialize_flat(plist))


def test_snapshot_errors():
    good = serialize_snapshot(build_list([(RecordKey.of("a.com"), IP("1.2.3.4"), 60)],
                                         no_chains, 1))
    with pytest.raises(BadMagic):
        parse_snapshot(b"XXXX" + good[4:])
    with pytest.raises(UnsupportedVersion):
        parse_snapshot(b"PLS9" + good[4:])
    with pytest.raises(TruncatedData):
        parse_snapshot(good[:-3])
    with pytest.raises(TruncatedData):
        parse_snapshot(good[:8])


def test_dangling_pool_index():
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    # empty pool, root with one child "com" holding an A entry at pool index 0
    body = (encode_varint(0) + b"\x00\x00\x01" + b"\x03com" + b"\x01" + bytes([QType.A])
            + b"\x00" + b"\x00" + b"\x3c" + b"\x00")
    data = b"PLS1" + (0).to_bytes(8, "little") + comp.compress(body) + comp.flush()
    with pytest.raises(DanglingPoolIndex):
        parse_snapshot(data)


def test_intern_order_of_first_appearance():
    plist = PopularityList()
    a, b = IP("1.2.3.4"), IP("5.6.7.8")
    assert [pool_intern(plist, x) for x in (a, b, a, a)] == [0, 1, 0, 0]


def test_intern_many_matches_distinct_count(rng):
    plist = PopularityList()
    raw = rng.integers(0, 20_000, size=100_000)
    for v in raw.tolist():
        plist.intern(ipaddress.IPv4Address(v))
    assert len(plist.pool) == len(set(raw.tolist()))
    assert all(plist.pool[plist.pool_index(x)] == x for x in plist.pool[:100])


@st.composite
def random_lists(draw):
    keys = draw(st.lists(st.builds(RecordKey, names, st.sampled_from([QType.A, QType.AAAA])),
                         unique=True, max_size=30))
    ranked = [(k, answer_for(k.qtype, draw(st.integers(0, 5))), draw(st.integers(1, 86400)))
              for k in keys]
    plist = build_list(ranked, no_chains, len(ranked))
    plist.version = draw(st.integers(0, 2**40))
    # remove a few to exercise explicit orders
    for order in draw(st.lists(st.integers(0, max(len(keys) - 1, 0)), unique=True, max_size=5)):
        if plist.entry_at(order) is not None:
            plist._remove(order)
    return plist


@given(random_lists())
def test_snapshot_roundtrip(plist):
    data = serialize_snapshot(plist)
    back = parse_snapshot(data)
    assert back == plist
    assert serialize_snapshot(back) == data


@given(random_lists())
def test_compacted_is_canonical_and_equivalent(plist):
    c = plist.compacted()
    assert c.is_canonical()
    assert {e.key: plist.pool[e.answer] for e in c} == {e.key: plist.pool[e.answer] for e in plist}


@given(random_lists())
def test_copy_is_independent(plist):
    c = plist.copy()
    c.intern(IP("203.0.113.250"))
    for e in list(c)[:1]:
        c._remove(e.order)
    assert parse_snapshot(serialize_snapshot(plist)) == plist
