"""Per-UAS CVSS averages, per-CIDR aggregation, CSV/GeoJSON reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

from .cpe import to_cpe_candidates

log = logging.getLogger(__name__)

HIST_BUCKETS = 10
CSV_COLUMNS = (["cidr", "uas_count", "avg_base", "avg_exploitability", "avg_impact"]
               + [f"hist_{i}" for i in range(HIST_BUCKETS)])


class NoScorableEntries(ValueError):
    pass


class MissingGeoTable(ValueError):
    pass


@dataclass
class UasVulnerability:
    cpe_count: int
    avg_base: float | None = None
    avg_exploitability: float | None = None
    avg_impact: float | None = None
    contributing_cves: list = field(default_factory=list)

    @property
    def scored(self):
        return self.avg_base is not None

    def to_record(self):
        return {"cpe_count": self.cpe_count, "avg_base": self.avg_base,
                "avg_exploitability": self.avg_exploitability, "avg_impact": self.avg_impact,
                "contributing_cves": list(self.contributing_cves)}

    @classmethod
    def from_record(cls, rec):
        return cls(int(rec.get("cpe_count", 0)), rec.get("avg_base"), rec.get("avg_exploitability"),
                   rec.get("avg_impact"), list(rec.get("contributing_cves", [])))


def _mean(values):
    return math.fsum(values) / len(values)


def score_records(records, cpe_count):
    """Average the three CVSS scores over CVEs deduplicated by id (first occurrence wins)."""
    seen = {}
    for rec in records:
        seen.setdefault(rec.cve_id, rec)
    unique = list(seen.values())
    if cpe_count == 0 or not unique:
        return UasVulnerability(cpe_count)
    return UasVulnerability(
        cpe_count,
        _mean([r.base_score for r in unique]),
        _mean([r.exploitability_score for r in unique]),
        _mean([r.impact_score for r in unique]),
        [r.cve_id for r in unique],
    )


def score_uas(parsed, client, aliases):
    cpes = to_cpe_candidates(parsed, aliases)
    records = []
    for cpe in cpes:
        records.extend(client.fetch_cves(cpe))
    return score_records(records, len(cpes))


@dataclass
class CidrAggregate:
    cidr: str
    uas_count: int
    avg_base: float
    avg_exploitability: float
    avg_impact: float
    base_score_histogram: list

    def to_row(self):
        return ([self.cidr, self.uas_count, repr(self.avg_base), repr(self.avg_exploitability),
                 repr(self.avg_impact)] + list(self.base_score_histogram))


def histogram_bucket(score):
    """[0,1) -> 0 ... [9,10] -> 9."""
    return min(int(math.floor(score)), HIST_BUCKETS - 1)


def aggregate_cidr(scores):
    """Group (ParsedUas, UasVulnerability) pairs by exact CIDR string.

    Members without a CIDR or without averages are left out entirely.
    """
    groups = {}
    for parsed, vuln in scores:
        if parsed.source_cidr is None or not vuln.scored:
            continue
        groups.setdefault(parsed.source_cidr, []).append(vuln)
    if not groups:
        raise NoScorableEntries("no entry has both a source CIDR and scores")
    out = []
    for cidr in sorted(groups):
        members = groups[cidr]
        hist = [0] * HIST_BUCKETS
        for v in members:
            hist[histogram_bucket(v.avg_base)] += 1
        out.append(CidrAggregate(
            cidr, len(members),
            _mean([v.avg_base for v in members]),
            _mean([v.avg_exploitability for v in members]),
            _mean([v.avg_impact for v in members]),
            hist,
        ))
    return out


def to_csv(aggregates):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for agg in aggregates:
        writer.writerow(agg.to_row())
    return buf.getvalue()


def read_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [CidrAggregate(
        r["cidr"], int(r["uas_count"]), float(r["avg_base"]), float(r["avg_exploitability"]),
        float(r["avg_impact"]), [int(r[f"hist_{i}"]) for i in range(HIST_BUCKETS)],
    ) for r in rows]


def to_geojson(aggregates, geo):
    """FeatureCollection with one point per CIDR found in ``geo``; returns (doc, skipped)."""
    if geo is None:
        raise MissingGeoTable("GeoJSON output needs a CIDR -> (lat, lon) table")
    features, skipped = [], 0
    for agg in aggregates:
        if agg.cidr not in geo:
            skipped += 1
            log.warning("no coordinates for %s; feature skipped", agg.cidr)
            continue
        lat, lon = geo[agg.cidr]
        props = dict(zip(CSV_COLUMNS[:5], [agg.cidr, agg.uas_count, agg.avg_base,
                                            agg.avg_exploitability, agg.avg_impact]))
        props.update({f"hist_{i}": n for i, n in enumerate(agg.base_score_histogram)})
        features.append({"type": "Feature",
                         "geometry": {"type": "Point", "coordinates": [float(lon), float(lat)]},
                         "properties": props})
    return {"type": "FeatureCollection", "features": features}, skipped


def load_geo_table(path):
    """Read a CIDR -> (lat, lon) table from JSON ({cidr: [lat, lon]}) or CSV (cidr,lat,lon)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return {k: (float(v[0]), float(v[1])) for k, v in json.loads(text).items()}
    return {r["cidr"]: (float(r["lat"]), float(r["lon"])) for r in csv.DictReader(io.StringIO(text))}


def emit_report(aggregates, fmt, path, geo=None):
    """Write the report; returns the number of CIDRs skipped for lack of coordinates."""
    if not aggregates:
        raise NoScorableEntries("nothing to report")
    if fmt == "csv":
        content, skipped = to_csv(aggregates), 0
    elif fmt == "geojson":
        doc, skipped = to_geojson(aggregates, geo)
        content = json.dumps(doc, indent=2)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(content)
    return skipped
