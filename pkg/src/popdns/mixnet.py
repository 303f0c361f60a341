"""Voting mix network: clients are the mix nodes, the server relays.

Onions keep a constant size at every hop. Each layer carries a fresh
X25519 ephemeral key, a 16-byte MAC and the next hop; peeling shifts the
body left by one layer and refills the tail with key-derived bytes the
sender precomputed (the filler trick from Sphinx), so neither the size nor
the padding reveals how many layers remain.

Layer keys come from SHAKE-256 over the shared secret, the body keystream
is SHAKE-256 output and the MAC is keyed BLAKE2b.
"""

from __future__ import annotations

import hashlib
import hmac
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from .errors import (
    DuplicateCredential,
    InvalidCertificate,
    LedgerMismatch,
    PathTooShort,
    PeelError,
    QuotaViolation,
    UncertifiedKey,
)
from .names import SERVER, RecordKey
from .voting import Ballot, Vote
from .wire import Reader, encode_key

PAD_SIZE = 1024
KEY_LEN = 32
MAC_LEN = 16
HOP_LEN = 4
HEADER_LEN = KEY_LEN + MAC_LEN
BODY_LEN = PAD_SIZE - HEADER_LEN
SHIFT = HEADER_LEN + HOP_LEN  # bytes consumed per layer
MAX_VOTE_LEN = 1 + 255


def max_path_length() -> int:
    return (BODY_LEN - HOP_LEN - MAX_VOTE_LEN) // SHIFT + 1


def _rand(rng: np.random.Generator | None, n: int) -> bytes:
    if rng is None:
        import os
        return os.urandom(n)
    return rng.bytes(n)


@dataclass(frozen=True)
class MixKeyPair:
    secret: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: np.random.Generator | None = None) -> "MixKeyPair":
        sk = X25519PrivateKey.from_private_bytes(_rand(rng, KEY_LEN))
        return cls(sk.private_bytes_raw(), sk.public_key().public_bytes_raw())

    def _private(self) -> X25519PrivateKey:
        sk = self.__dict__.get("_sk")
        if sk is None:
            sk = X25519PrivateKey.from_private_bytes(self.secret)
            object.__setattr__(self, "_sk", sk)
        return sk

    def exchange(self, peer_public: bytes) -> bytes:
        try:
            return self._private().exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError as exc:
            raise PeelError(f"key exchange failed: {exc}") from None


@dataclass(frozen=True)
class Onion:
    next_hop: int
    block: bytes

    def __post_init__(self):
        if len(self.block) != PAD_SIZE:
            raise ValueError(f"onion block must be {PAD_SIZE} bytes, got {len(self.block)}")

    def to_bytes(self) -> bytes:
        return self.next_hop.to_bytes(4, "little") + self.block

    @classmethod
    def from_bytes(cls, data: bytes) -> "Onion":
        if len(data) != HOP_LEN + PAD_SIZE:
            raise ValueError("bad onion length")
        return cls(int.from_bytes(data[:4], "little"), bytes(data[4:]))


@dataclass(frozen=True)
class MixPath:
    hops: tuple[int, ...]

    def __post_init__(self):
        if len(self.hops) < 1:
            raise PathTooShort("a mix path needs at least one hop")
        if len(set(self.hops)) != len(self.hops):
            raise ValueError("mix path hops must be distinct")

    def __len__(self) -> int:
        return len(self.hops)


# -- registration ------------------------------------------------------------

_CERT_CONTEXT = b"popdns mix key v1:"


class CertificateAuthority:
    """Issues certificates binding a client's mix public key (stand-in PKI)."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._key = Ed25519PrivateKey.from_private_bytes(_rand(rng, 32))
        self.public_key = self._key.public_key().public_bytes_raw()

    def issue(self, mix_public: bytes) -> bytes:
        return self._key.sign(_CERT_CONTEXT + mix_public)


@dataclass
class _Member:
    public_key: bytes
    certificate: bytes


class Registry:
    """Registered clients and their certificate-checked mix keys.

    One registration per credential. Credentials are kept only as SHA-256
    digests.
    """

    def __init__(self, authority_key: bytes):
        self._authority = Ed25519PublicKey.from_public_bytes(authority_key)
        self._members: dict[int, _Member] = {}
        self._credentials: set[bytes] = set()

    def __contains__(self, client: int) -> bool:
        return client in self._members

    def __len__(self) -> int:
        return len(self._members)

    @property
    def clients(self) -> list[int]:
        return sorted(self._members)

    def _check(self, public_key: bytes, certificate: bytes) -> None:
        try:
            self._authority.verify(certificate, _CERT_CONTEXT + public_key)
        except InvalidSignature:
            raise InvalidCertificate("certificate does not match the public key") from None

    def register(self, credential: str | bytes, public_key: bytes, certificate: bytes) -> int:
        if isinstance(credential, str):
            credential = credential.encode()
        digest = hashlib.sha256(credential).digest()
        if digest in self._credentials:
            raise DuplicateCredential("credential already registered")
        self._check(public_key, certificate)
        self._credentials.add(digest)
        client = len(self._members)
        self._members[client] = _Member(bytes(public_key), bytes(certificate))
        return client

    def certified_key(self, client: int) -> bytes:
        member = self._members.get(client)
        if member is None:
            raise UncertifiedKey(f"client {client} is not registered")
        return member.public_key

    def revalidate(self, client: int) -> bytes:
        """Re-check a peer's certificate (e.g. before trusting a cached key)."""
        member = self._members.get(client)
        if member is None:
            raise UncertifiedKey(f"client {client} is not registered")
        try:
            self._check(member.public_key, member.certificate)
        except InvalidCertificate:
            raise UncertifiedKey(f"client {client} has an invalid certificate") from None
        return member.public_key


def register_client(credential: str | bytes, public_key: bytes, certificate: bytes,
                    registry: Registry) -> int:
    return registry.register(credential, public_key, certificate)


def make_network(n_clients: int, rng: np.random.Generator | None = None
                 ) -> tuple[Registry, dict[int, MixKeyPair]]:
    """Registry of ``n_clients`` freshly keyed clients (test/simulation helper)."""
    ca = CertificateAuthority(rng)
    registry = Registry(ca.public_key)
    keys = {}
    for i in range(n_clients):
        kp = MixKeyPair.generate(rng)
        cid = registry.register(f"client-{i}", kp.public, ca.issue(kp.public))
        keys[cid] = kp
    return registry, keys


# -- layer crypto ------------------------------------------------------------

def _layer_keys(shared: bytes, eph_public: bytes) -> tuple[bytes, bytes]:
    material = hashlib.shake_256(b"popdns layer" + shared + eph_public).digest(64)
    return material[:32], material[32:]


def _stream(key: bytes, n: int) -> bytes:
    return hashlib.shake_256(b"popdns stream" + key).digest(n)


def _mac(key: bytes, data: bytes) -> bytes:
    return hashlib.blake2b(data, key=key, digest_size=MAC_LEN).digest()


def _xor(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "little") ^ int.from_bytes(b[:n], "little")).to_bytes(n, "little")


def encode_vote(vote: Vote) -> bytes:
    return bytes([vote.qtype]) + encode_key(vote)[:-1]


def decode_vote(data: bytes) -> Vote:
    rd = Reader(data, error=PeelError)
    qtype = rd.u8()
    name = rd.name()
    try:
        return RecordKey(name, qtype)
    except ValueError as exc:
        raise PeelError(f"bad vote payload: {exc}") from None


def choose_path(registry: Registry, sender: int, rounds: int,
                rng: np.random.Generator) -> MixPath:
    candidates = [c for c in registry.clients if c != sender]
    if rounds < 1 or len(candidates) < rounds:
        raise PathTooShort(f"need {rounds} distinct peers, have {len(candidates)}")
    picks = rng.choice(len(candidates), size=rounds, replace=False)
    return MixPath(tuple(candidates[i] for i in picks))


def wrap_vote(vote: Vote, path: MixPath, registry: Registry,
              rng: np.random.Generator | None = None) -> Onion:
    """Seal ``vote`` for ``path``; hop 0 peels the outermost layer."""
    hops = path.hops
    r = len(hops)
    payload = encode_vote(vote)
    inner_len = BODY_LEN - (r - 1) * SHIFT
    if HOP_LEN + len(payload) > inner_len:
        raise ValueError(f"path of {r} hops leaves no room for a {len(payload)}-byte vote")
    publics = [registry.certified_key(h) for h in hops]

    eph_pub, stream_keys, mac_keys, streams = [], [], [], []
    for pub in publics:
        eph = X25519PrivateKey.from_private_bytes(_rand(rng, KEY_LEN))
        epub = eph.public_key().public_bytes_raw()
        shared = eph.exchange(X25519PublicKey.from_public_bytes(pub))
        sk, mk = _layer_keys(shared, epub)
        eph_pub.append(epub)
        mac_keys.append(mk)
        streams.append(_stream(sk, BODY_LEN + SHIFT))

    # tail bytes each hop will append, as seen by the last hop
    filler = b""
    for i in range(r - 1):
        filler = _xor(filler + bytes(SHIFT), streams[i][BODY_LEN - i * SHIFT:BODY_LEN + SHIFT])

    plain = SERVER.to_bytes(4, "little") + payload
    plain += bytes(inner_len - len(plain))
    body = _xor(plain, streams[-1]) + filler
    block = eph_pub[-1] + _mac(mac_keys[-1], body) + body
    for i in range(r - 2, -1, -1):
        plain = (hops[i + 1].to_bytes(4, "little") + block)[:BODY_LEN]
        body = _xor(plain, streams[i])
        block = eph_pub[i] + _mac(mac_keys[i], body) + body
    return Onion(hops[0], block)


def peel(onion: Onion, keypair: MixKeyPair) -> tuple[Onion | Vote, int]:
    """Remove one layer. Returns ``(inner onion, next hop)`` or ``(vote, SERVER)``."""
    block = onion.block
    epub, tag, body = block[:KEY_LEN], block[KEY_LEN:HEADER_LEN], block[HEADER_LEN:]
    sk, mk = _layer_keys(keypair.exchange(epub), epub)
    if not hmac.compare_digest(_mac(mk, body), tag):
        raise PeelError("layer MAC mismatch")
    plain = _xor(body + bytes(SHIFT), _stream(sk, BODY_LEN + SHIFT))
    next_hop = int.from_bytes(plain[:HOP_LEN], "little")
    if next_hop == SERVER:
        return decode_vote(plain[HOP_LEN:]), SERVER
    return Onion(next_hop, plain[HOP_LEN:]), next_hop


@dataclass
class ShuffleResult:
    items: list  # Onion or terminal Vote
    dropped: list[int]  # input positions that failed to peel


def node_shuffle(batch: Sequence[Onion], keypair: MixKeyPair,
                 rng: np.random.Generator) -> ShuffleResult:
    items, dropped = [], []
    for i, onion in enumerate(batch):
        try:
            items.append(peel(onion, keypair)[0])
        except PeelError:
            dropped.append(i)
    perm = rng.permutation(len(items))
    return ShuffleResult([items[j] for j in perm], dropped)


def server_route(onions: Iterable[Onion], registry: Registry
                 ) -> tuple[dict[int, list[Onion]], list[Onion]]:
    """Group onions by next hop. Each batch is sorted by ciphertext so its
    order carries nothing the server chose. Unregistered hops are dropped."""
    batches: dict[int, list[Onion]] = defaultdict(list)
    dropped = []
    for onion in onions:
        if onion.next_hop in registry:
            batches[onion.next_hop].append(onion)
        else:
            dropped.append(onion)
    for batch in batches.values():
        batch.sort(key=lambda o: o.block)
    return dict(batches), dropped


# -- rounds ------------------------------------------------------------------

@dataclass
class RoundLedger:
    """What the server saw: submissions per client, onions in/out per node and round."""

    submitted: dict[int, int] = field(default_factory=dict)
    in_count: dict[tuple[int, int], int] = field(default_factory=dict)
    out_count: dict[tuple[int, int], int] = field(default_factory=dict)
    flagged: dict[tuple[int, int], int] = field(default_factory=dict)
    route_drops: int = 0
    violations: list[tuple[int, int]] = field(default_factory=list)

    def record(self, node: int, round_: int, n_in: int, n_out: int, n_flagged: int) -> bool:
        key = (node, round_)
        self.in_count[key] = n_in
        self.out_count[key] = n_out
        if n_flagged:
            self.flagged[key] = n_flagged
        ok = n_in == n_out + n_flagged
        if not ok:
            self.violations.append(key)
        return ok

    def conserved(self) -> bool:
        return not self.violations


Tamper = Callable[[int, int, list], list]
Observer = Callable[[int, int, list, list], None]


def run_voting_round(ballots: Mapping[int, Ballot], registry: Registry, rounds: int,
                     rng: np.random.Generator, keypairs: Mapping[int, MixKeyPair],
                     v_max: int = 10, tamper: Tamper | None = None,
                     observer: Observer | None = None, on_mismatch: str = "raise",
                     ) -> tuple[list[Vote], RoundLedger]:
    """Run one full voting round and return the anonymised votes.

    ``keypairs`` stands in for the clients' own node processing. ``tamper``
    lets a test play a malicious node (it may rewrite a node's output);
    ``observer`` sees every node's input and output batch. On a ledger
    mismatch the round either raises (``"raise"``) or discards that node's
    output (``"discard"``).
    """
    if on_mismatch not in ("raise", "discard"):
        raise ValueError("on_mismatch must be 'raise' or 'discard'")
    ledger = RoundLedger()
    for client, ballot in ballots.items():
        if len(ballot) > v_max:
            raise QuotaViolation(client, len(ballot), v_max)
        ledger.submitted[client] = len(ballot)

    holding: list[Onion] = []
    for client in sorted(ballots):
        for vote in ballots[client]:
            path = choose_path(registry, client, rounds, rng)
            holding.append(wrap_vote(vote, path, registry, rng))

    votes: list[Vote] = []
    for r in range(rounds):
        batches, dropped = server_route(holding, registry)
        ledger.route_drops += len(dropped)
        holding = []
        for node in sorted(batches):
            batch = batches[node]
            result = node_shuffle(batch, keypairs[node], rng)
            out = result.items
            if tamper is not None:
                out = tamper(node, r, list(out))
            if observer is not None:
                observer(r, node, batch, out)
            if not ledger.record(node, r, len(batch), len(out), len(result.dropped)):
                if on_mismatch == "raise":
                    raise LedgerMismatch(node, r, len(batch), len(out) + len(result.dropped))
                continue
            for item in out:
                if isinstance(item, Onion):
                    holding.append(item)
                else:
                    votes.append(item)
    # anything still in flight had a path longer than the round count
    ledger.route_drops += len(holding)
    return votes, ledger
