"""Parsed UA fields -> CPE 2.3 names."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources

log = logging.getLogger(__name__)

WILDCARD = "*"
_UNRESERVED = re.compile(r"[A-Za-z0-9._\-]")


class EmptyTuple(ValueError):
    pass


@dataclass(frozen=True)
class ParsedUas:
    os_name: str | None = None
    os_version: str | None = None
    software_name: str | None = None
    software_version: str | None = None
    source_cidr: str | None = None

    @property
    def four_tuple(self):
        return (self.os_name, self.os_version, self.software_name, self.software_version)

    @classmethod
    def from_record(cls, rec):
        def get(key):
            value = rec.get(key)
            return None if value in (None, "") else str(value)
        return cls(get("os_name"), get("os_version"), get("software_name"),
                   get("software_version"), get("source_cidr"))

    def to_record(self):
        return {k: v for k, v in zip(
            ("os_name", "os_version", "software_name", "software_version", "source_cidr"),
            self.four_tuple + (self.source_cidr,)) if v is not None}


def _escape(value):
    return "".join(ch if _UNRESERVED.match(ch) else "\\" + ch for ch in value)


@dataclass(frozen=True)
class CpeName:
    part: str
    vendor: str
    product: str
    version: str = WILDCARD

    def __post_init__(self):
        if self.part not in ("a", "o"):
            raise ValueError(f"CPE part must be 'a' or 'o', got {self.part!r}")

    def __str__(self):
        version = self.version if self.version == WILDCARD else _escape(self.version.lower())
        return (f"cpe:2.3:{self.part}:{_escape(self.vendor)}:{_escape(self.product)}:"
                f"{version}:*:*:*:*:*:*:*")

    @property
    def uri(self):
        return str(self)


@dataclass
class AliasTable:
    os: dict
    software: dict

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d.get("os", {})), dict(d.get("software", {})))

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("uasparse.data").joinpath("aliases.json").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))

    def lookup(self, kind, name):
        table = self.os if kind == "os" else self.software
        if name in table:
            return table[name]
        folded = name.casefold()
        for key, value in table.items():
            if key.casefold() == folded:
                return value
        return None


def to_cpe_candidates(parsed, aliases, unmapped=None):
    """OS name -> part 'o' CPE, software name -> part 'a' CPE; unknown names are skipped.

    Names that have no alias are appended to ``unmapped`` when a list is given.
    """
    if all(v is None for v in parsed.four_tuple):
        raise EmptyTuple("all four fields are absent")
    out = []
    for kind, part, name, version in (("os", "o", parsed.os_name, parsed.os_version),
                                      ("software", "a", parsed.software_name, parsed.software_version)):
        if name is None:
            continue
        alias = aliases.lookup(kind, name)
        if alias is None:
            if unmapped is not None:
                unmapped.append(name)
            log.debug("no CPE alias for %s name %r", kind, name)
            continue
        out.append(CpeName(part, alias["vendor"], alias["product"], version or WILDCARD))
    return out
