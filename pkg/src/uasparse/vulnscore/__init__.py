from .cpe import AliasTable, CpeName, EmptyTuple, ParsedUas, to_cpe_candidates
from .nvd import (CveRecord, MalformedResponse, NetworkError, NvdClient, NvdClientConfig,
                  RateLimited, fetch_cves)
from .scoring import (CidrAggregate, MissingGeoTable, NoScorableEntries, UasVulnerability,
                      aggregate_cidr, emit_report, read_csv, score_uas)

__all__ = [
    "AliasTable", "CpeName", "EmptyTuple", "ParsedUas", "to_cpe_candidates",
    "CveRecord", "MalformedResponse", "NetworkError", "NvdClient", "NvdClientConfig",
    "RateLimited", "fetch_cves",
    "CidrAggregate", "MissingGeoTable", "NoScorableEntries", "UasVulnerability",
    "aggregate_cidr", "emit_report", "read_csv", "score_uas",
]
