"""Private DNS through a voted, client-replicated popularity list."""

from .names import DomainName, QType, RecordKey, parse_domain, present_domain
from .poplist import PopularityList, build_list, lookup, parse_snapshot, serialize_snapshot
from .voting import Ballot, PopularityVoter, RoundConfig, WeightTable

__version__ = "0.1.0"

__all__ = [
    "Ballot", "DomainName", "PopularityList", "PopularityVoter", "QType", "RecordKey",
    "RoundConfig", "WeightTable", "build_list", "lookup", "parse_domain", "parse_snapshot",
    "present_domain", "serialize_snapshot",
]
