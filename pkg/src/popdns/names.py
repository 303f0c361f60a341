"""DNS vocabulary: domain names, record keys and answers.

Names are stored root-first (``www.example.com`` -> ``("com", "example", "www")``)
so that a tuple prefix is a DNS suffix and the popularity trie is a plain
prefix tree.
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass
from typing import Union

from .errors import EmptyLabel, LabelTooLong, NameTooLong, NonAsciiName, UnsupportedType

MAX_LABEL = 63
MAX_NAME = 253


class QType(enum.IntEnum):
    A = 1
    CNAME = 5
    AAAA = 28

    @classmethod
    def parse(cls, text: str) -> "QType":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise UnsupportedType(f"unsupported record type {text!r}") from None


@dataclass(frozen=True, order=True)
class DomainName:
    labels: tuple[str, ...]

    def __post_init__(self):
        _check_labels(self.labels)
        object.__setattr__(self, "_hash", hash(self.labels))

    def __hash__(self) -> int:
        # names key every hot dict; cache instead of rehashing the label tuple
        return self._hash

    def __reduce__(self):
        # rebuild rather than restore: the cached hash is per process
        return DomainName, (self.labels,)

    def __str__(self) -> str:
        return present_domain(self)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def wire_length(self) -> int:
        # presentation length without trailing dot
        return sum(len(lbl) for lbl in self.labels) + max(len(self.labels) - 1, 0)


def _check_labels(labels: tuple[str, ...]) -> None:
    if not labels:
        raise EmptyLabel("domain name has no labels")
    total = -1
    for lbl in labels:
        if not lbl:
            raise EmptyLabel("empty label")
        if not lbl.isascii():
            raise NonAsciiName(f"non-ASCII label {lbl!r}")
        if len(lbl) > MAX_LABEL:
            raise LabelTooLong(f"label of {len(lbl)} bytes exceeds {MAX_LABEL}")
        if lbl != lbl.lower():
            raise ValueError(f"label {lbl!r} is not lowercase")
        total += len(lbl) + 1
    if total > MAX_NAME:
        raise NameTooLong(f"name of {total} bytes exceeds {MAX_NAME}")


def parse_domain(text: str) -> DomainName:
    """Parse a presentation-form name such as ``"WWW.Example.COM."``."""
    if not isinstance(text, str) or not text:
        raise EmptyLabel("empty domain name")
    if not text.isascii():
        raise NonAsciiName(f"non-ASCII name {text!r}")
    if text.endswith("."):
        text = text[:-1]
    parts = text.lower().split(".")
    return DomainName(tuple(reversed(parts)))


def present_domain(name: DomainName) -> str:
    return ".".join(reversed(name.labels))


# A and AAAA answers are ipaddress objects; a CNAME answer is the target name.
RecordAnswer = Union[ipaddress.IPv4Address, ipaddress.IPv6Address, DomainName]


def answer_matches(answer: RecordAnswer, qtype: QType) -> bool:
    """True if ``answer`` is a terminal answer for ``qtype``."""
    if qtype is QType.A:
        return isinstance(answer, ipaddress.IPv4Address)
    if qtype is QType.AAAA:
        return isinstance(answer, ipaddress.IPv6Address)
    return isinstance(answer, DomainName)


def answer_qtype(answer: RecordAnswer) -> QType:
    if isinstance(answer, ipaddress.IPv4Address):
        return QType.A
    if isinstance(answer, ipaddress.IPv6Address):
        return QType.AAAA
    if isinstance(answer, DomainName):
        return QType.CNAME
    raise TypeError(f"not a record answer: {answer!r}")


def parse_answer(text: str, qtype: QType) -> RecordAnswer:
    if qtype is QType.CNAME:
        return parse_domain(text)
    addr = ipaddress.ip_address(text)
    if not answer_matches(addr, qtype):
        raise ValueError(f"{text} is not a valid {qtype.name} answer")
    return addr


@dataclass(frozen=True, order=True)
class RecordKey:
    name: DomainName
    qtype: QType

    def __post_init__(self):
        if not isinstance(self.qtype, QType):
            object.__setattr__(self, "qtype", QType(self.qtype))
        object.__setattr__(self, "_hash", hash((self.name._hash, int(self.qtype))))

    def __hash__(self) -> int:
        return self._hash

    def __reduce__(self):
        return RecordKey, (self.name, self.qtype)

    @property
    def sort_key(self) -> tuple:
        """Plain tuple with the same ordering as the key itself (cheap to compare)."""
        return (self.name.labels, int(self.qtype))

    @classmethod
    def of(cls, name: str, qtype: str | QType = QType.A) -> "RecordKey":
        if isinstance(qtype, str):
            qtype = QType.parse(qtype)
        return cls(parse_domain(name), qtype)

    def __str__(self) -> str:
        return f"{self.name}/{self.qtype.name}"


def check_ttl(ttl: int) -> int:
    ttl = int(ttl)
    if ttl < 1:
        raise ValueError(f"TTL must be >= 1 s, got {ttl}")
    return ttl


SERVER = 0xFFFFFFFF  # next-hop sentinel: deliver to the public server
