"""CVE retrieval for CPE names: NVD REST client, persistent cache, offline fixtures."""

from __future__ import annotations

import collections
import json
import logging
import os
import threading
import time
from dataclasses import dataclass

log = logging.getLogger(__name__)

NVD_URL = "https://services.nvd.nist.gov/rest/json/cves/2.0"
PAGE_SIZE = 2000
WINDOW_SECONDS = 30.0
# preference order when a CVE carries several CVSS versions
_METRIC_KEYS = (("cvssMetricV31", "3.1"), ("cvssMetricV30", "3.0"), ("cvssMetricV2", "2.0"))


class NetworkError(RuntimeError):
    pass


class RateLimited(RuntimeError):
    pass


class MalformedResponse(ValueError):
    pass


@dataclass(frozen=True)
class CveRecord:
    cve_id: str
    base_score: float
    exploitability_score: float
    impact_score: float
    cvss_version: str

    def __post_init__(self):
        for name in ("base_score", "exploitability_score", "impact_score"):
            value = getattr(self, name)
            if not 0 <= value <= 10:
                raise MalformedResponse(f"{self.cve_id}: {name}={value} outside [0, 10]")

    def to_fixture(self):
        return {"cve_id": self.cve_id, "base": self.base_score,
                "exploitability": self.exploitability_score, "impact": self.impact_score,
                "cvss_version": self.cvss_version}

    @classmethod
    def from_fixture(cls, d):
        try:
            return cls(str(d["cve_id"]), float(d["base"]), float(d["exploitability"]),
                       float(d["impact"]), str(d.get("cvss_version", "3.1")))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad fixture entry {d!r}") from exc


def _version_rank(version):
    return tuple(int(p) for p in str(version).split("."))


def prefer_latest(records):
    """One record per CVE id, keeping the highest CVSS version; first-seen order."""
    best = {}
    for rec in records:
        cur = best.get(rec.cve_id)
        if cur is None or _version_rank(rec.cvss_version) > _version_rank(cur.cvss_version):
            best[rec.cve_id] = rec
    return list(best.values())


def parse_nvd_item(item):
    """CveRecord from one element of an NVD 2.0 ``vulnerabilities`` array (None if unscored)."""
    try:
        cve = item["cve"]
        cve_id = cve["id"]
    except (KeyError, TypeError) as exc:
        raise MalformedResponse("vulnerability item without cve.id") from exc
    metrics = cve.get("metrics") or {}
    for key, version in _METRIC_KEYS:
        entries = metrics.get(key) or []
        if not entries:
            continue
        primary = [e for e in entries if e.get("type") == "Primary"]
        entry = (primary or entries)[0]
        try:
            return CveRecord(cve_id, float(entry["cvssData"]["baseScore"]),
                             float(entry["exploitabilityScore"]), float(entry["impactScore"]),
                             version)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"{cve_id}: incomplete {key} entry") from exc
    return None


def parse_nvd_response(payload):
    if not isinstance(payload, dict) or not isinstance(payload.get("vulnerabilities"), list):
        raise MalformedResponse("response lacks a 'vulnerabilities' list")
    return [r for r in (parse_nvd_item(i) for i in payload["vulnerabilities"]) if r is not None]


def _records_from_fixture_value(value):
    if isinstance(value, dict):
        return parse_nvd_response(value)
    if isinstance(value, list):
        return [CveRecord.from_fixture(d) for d in value]
    raise MalformedResponse("fixture values must be a list of CVE entries or an NVD response")


@dataclass
class NvdClientConfig:
    base_url: str = NVD_URL
    api_key: str | None = None
    max_requests_per_30s: int | None = None
    cache_path: str | None = None
    offline_fixture: str | None = None
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 2.0

    def __post_init__(self):
        if self.max_requests_per_30s is None:
            self.max_requests_per_30s = 50 if self.api_key else 5

    @classmethod
    def from_env(cls, **kwargs):
        kwargs.setdefault("api_key", os.environ.get("NVD_API_KEY") or None)
        return cls(**kwargs)


class RateGate:
    """Sliding-window limiter: at most ``limit`` acquisitions per ``window`` seconds."""

    def __init__(self, limit, window=WINDOW_SECONDS, clock=time.monotonic, sleep=time.sleep):
        self.limit = limit
        self.window = window
        self.clock = clock
        self.sleep = sleep
        self._stamps = collections.deque()
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            while True:
                now = self.clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                self.sleep(self.window - (now - self._stamps[0]))


class CveCache:
    """Line-delimited JSON cache keyed by canonical CPE string; later lines win."""

    def __init__(self, path):
        self.path = path
        self._entries = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        row = json.loads(line)
                        self._entries[row["cpe"]] = [CveRecord.from_fixture(d) for d in row["cves"]]
                    except (json.JSONDecodeError, KeyError, MalformedResponse):
                        log.warning("ignoring corrupt cache line in %s", path)

    def get(self, cpe):
        return self._entries.get(cpe)

    def put(self, cpe, records):
        with self._lock:
            self._entries[cpe] = list(records)
            if self.path:
                row = {"cpe": cpe, "fetched_at": time.time(),
                       "cves": [r.to_fixture() for r in records]}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row) + "\n")


class NvdClient:
    def __init__(self, config=None, session=None, gate=None, sleep=time.sleep):
        self.config = config or NvdClientConfig.from_env()
        self._fixture = None
        if self.config.offline_fixture:
            with open(self.config.offline_fixture, encoding="utf-8") as fh:
                raw = json.load(fh)
            if not isinstance(raw, dict):
                raise MalformedResponse("fixture must map CPE strings to CVE lists")
            self._fixture = {cpe: _records_from_fixture_value(v) for cpe, v in raw.items()}
        self.cache = CveCache(self.config.cache_path)
        self.session = session
        self.gate = gate or RateGate(self.config.max_requests_per_30s)
        self.sleep = sleep
        self.requests_made = 0

    @property
    def offline(self):
        return self._fixture is not None

    def fetch_cves(self, cpe):
        key = str(cpe)
        if self._fixture is not None:
            return prefer_latest(self._fixture.get(key, []))
        cached = self.cache.get(key)
        if cached is not None:
            return list(cached)
        records = prefer_latest(self._fetch_all(key))
        self.cache.put(key, records)
        return records

    def _fetch_all(self, cpe):
        records, start = [], 0
        while True:
            payload = self._get_page(cpe, start)
            records.extend(parse_nvd_response(payload))
            total = int(payload.get("totalResults", 0))
            page = int(payload.get("resultsPerPage", 0)) or len(payload["vulnerabilities"])
            start += page
            if page == 0 or start >= total:
                return records

    def _get_page(self, cpe, start):
        if self.session is None:
            import requests
            self.session = requests.Session()
        headers = {"apiKey": self.config.api_key} if self.config.api_key else {}
        params = {"virtualMatchString": cpe, "startIndex": start, "resultsPerPage": PAGE_SIZE}
        delay = self.config.backoff
        last_error = None
        for attempt in range(self.config.retries + 1):
            self.gate.acquire()
            self.requests_made += 1
            try:
                resp = self.session.get(self.config.base_url, params=params, headers=headers,
                                        timeout=self.config.timeout)
            except Exception as exc:  # transport failure of any kind
                last_error = NetworkError(f"{cpe}: {exc}")
            else:
                if resp.status_code in (403, 429):
                    last_error = RateLimited(f"NVD returned {resp.status_code} for {cpe}")
                    log.warning("rate limited by NVD; waiting %.0fs", WINDOW_SECONDS)
                    self.sleep(WINDOW_SECONDS)
                    continue
                if resp.status_code >= 500:
                    last_error = NetworkError(f"NVD returned {resp.status_code} for {cpe}")
                elif resp.status_code != 200:
                    raise NetworkError(f"NVD returned {resp.status_code} for {cpe}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise MalformedResponse(f"non-JSON body for {cpe}") from exc
            if attempt < self.config.retries:
                self.sleep(delay)
                delay *= 2
        raise last_error


def fetch_cves(cpe, client):
    return client.fetch_cves(cpe)
