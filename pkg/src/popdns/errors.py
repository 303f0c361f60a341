"""Exception hierarchy shared across the package."""


class PopDNSError(Exception):
    """Base class for every error raised by popdns."""


# -- names -------------------------------------------------------------------

class DomainNameError(PopDNSError, ValueError):
    pass


class EmptyLabel(DomainNameError):
    pass


class LabelTooLong(DomainNameError):
    pass


class NameTooLong(DomainNameError):
    pass


class NonAsciiName(DomainNameError):
    pass


class UnsupportedType(PopDNSError, ValueError):
    pass


# -- snapshot ----------------------------------------------------------------

class SnapshotError(PopDNSError):
    pass


class BadMagic(SnapshotError):
    pass


class UnsupportedVersion(SnapshotError):
    pass


class TruncatedData(SnapshotError):
    pass


class DecompressionError(SnapshotError):
    pass


class DanglingPoolIndex(SnapshotError):
    pass


# -- deltas ------------------------------------------------------------------

class DeltaError(PopDNSError):
    pass


class VersionGap(DeltaError):
    """Batch does not start at the replica's version; refetch a snapshot."""

    def __init__(self, expected: int, got: int):
        super().__init__(f"replica at version {expected}, batch starts at {got}")
        self.expected = expected
        self.got = got


class MalformedDelta(DeltaError):
    pass


class DanglingReference(DeltaError):
    pass


# -- mix network -------------------------------------------------------------

class MixnetError(PopDNSError):
    pass


class PeelError(MixnetError):
    """Layer could not be opened (wrong key or corrupted onion)."""


class UncertifiedKey(MixnetError):
    pass


class PathTooShort(MixnetError):
    pass


class QuotaViolation(MixnetError):
    def __init__(self, client: int, submitted: int, allowed: int):
        super().__init__(f"client {client} submitted {submitted} onions, quota is {allowed}")
        self.client = client
        self.submitted = submitted
        self.allowed = allowed


class LedgerMismatch(MixnetError):
    def __init__(self, node: int, round_: int, in_count: int, out_count: int):
        super().__init__(
            f"node {node} round {round_}: received {in_count}, returned {out_count}"
        )
        self.node = node
        self.round = round_
        self.in_count = in_count
        self.out_count = out_count


class DuplicateCredential(MixnetError):
    pass


class InvalidCertificate(MixnetError):
    pass


# -- traces / config ---------------------------------------------------------

class TraceFormatError(PopDNSError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(PopDNSError, ValueError):
    pass


class InvariantViolation(PopDNSError):
    """A simulation consistency check failed (replica drift, unbalanced ledger)."""
