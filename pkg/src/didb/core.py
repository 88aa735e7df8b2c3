"""Identity fields, canonical bundling, truncated hashing and the 46-char record.

A record is a ``yyyymm`` birth prefix followed by the first 160 bits of a
SHA-256 digest in lowercase hex.  Builder, node and client all go through
:func:`make_record`, so the canonical form below is a compatibility contract:
changing it invalidates every deployed store.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import re
import unicodedata
from dataclasses import dataclass

from .errors import (
    BadDigestAlphabet,
    BadLength,
    BadPrefix,
    FieldContainsSeparator,
    InvalidDate,
    InvalidField,
)

SEPARATOR = "|"
PREFIX_LEN = 6
DIGEST_LEN = 40
RECORD_LEN = PREFIX_LEN + DIGEST_LEN
MIN_YEAR = 1800

_HEX_RE = re.compile(r"[0-9a-f]{40}\Z")
_DATE_RE = re.compile(r"[0-9]{4}-[0-9]{2}-[0-9]{2}\Z")


def parse_date(text: str) -> dt.date:
    """Parse a strict ``YYYY-MM-DD`` date, raising :class:`InvalidDate`."""
    text = text.strip()
    if not _DATE_RE.match(text):
        raise InvalidDate(f"expected YYYY-MM-DD, got {text!r}")
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise InvalidDate(f"{text!r}: {exc}") from None


@dataclass(frozen=True)
class IdentityFields:
    serial: str
    name: str
    date_of_birth: dt.date
    blood_group: str = ""
    place_of_birth: str = ""
    issue_date: dt.date = dt.date(1970, 1, 1)

    def __post_init__(self):
        for attr in ("serial", "name", "blood_group", "place_of_birth"):
            if not isinstance(getattr(self, attr), str):
                raise InvalidField(f"{attr} must be text")
        if not self.serial.strip():
            raise InvalidField("serial is empty")
        if not self.name.strip():
            raise InvalidField("name is empty")
        for attr in ("date_of_birth", "issue_date"):
            value = getattr(self, attr)
            if not isinstance(value, dt.date) or isinstance(value, dt.datetime):
                raise InvalidDate(f"{attr} must be a calendar date")
        if self.date_of_birth.year < MIN_YEAR:
            raise InvalidDate(f"date_of_birth year {self.date_of_birth.year} < {MIN_YEAR}")

    @classmethod
    def from_strings(cls, serial, name, date_of_birth, blood_group,
                     place_of_birth, issue_date) -> "IdentityFields":
        """Build from raw text columns (CSV rows, CLI flags)."""
        return cls(
            serial=serial,
            name=name,
            date_of_birth=parse_date(date_of_birth),
            blood_group=blood_group,
            place_of_birth=place_of_birth,
            issue_date=parse_date(issue_date),
        )


def _clean(text: str, upper: bool = False) -> str:
    text = " ".join(unicodedata.normalize("NFC", text).split())
    if upper:
        text = text.upper()
    text = unicodedata.normalize("NFC", text)
    if SEPARATOR in text:
        raise FieldContainsSeparator(f"field contains {SEPARATOR!r}: {text!r}")
    return text


def canonicalize(fields: IdentityFields) -> bytes:
    parts = [
        _clean(fields.serial),
        _clean(fields.name, upper=True),
        fields.date_of_birth.isoformat(),
        _clean(fields.blood_group, upper=True),
        _clean(fields.place_of_birth),
        fields.issue_date.isoformat(),
    ]
    return SEPARATOR.join(parts).encode("utf-8")


def truncated_sha256(data: bytes) -> str:
    return hashlib.sha256(data).digest()[:20].hex()


def derive_prefix(date_of_birth: dt.date) -> str:
    return f"{date_of_birth.year:04d}{date_of_birth.month:02d}"


def check_prefix(prefix: str) -> str:
    if len(prefix) != PREFIX_LEN or not (prefix.isascii() and prefix.isdigit()):
        raise BadPrefix(f"prefix must be 6 ASCII digits: {prefix!r}")
    year, month = int(prefix[:4]), int(prefix[4:])
    if year < MIN_YEAR or not 1 <= month <= 12:
        raise BadPrefix(f"prefix out of range: {prefix!r}")
    return prefix


def check_digest(digest: str) -> str:
    if len(digest) != DIGEST_LEN:
        raise BadLength(f"digest must be {DIGEST_LEN} chars, got {len(digest)}")
    if not _HEX_RE.match(digest):
        raise BadDigestAlphabet(f"digest must be lowercase hex: {digest!r}")
    return digest


@dataclass(frozen=True, order=True)
class DidbRecord:
    """One stored identity: birth prefix plus truncated digest.

    Ordering compares ``(prefix, digest)``, which equals ordering of the
    encoded 46-char strings because the prefix has a fixed width.
    """

    prefix: str
    digest: str

    def __post_init__(self):
        check_prefix(self.prefix)
        check_digest(self.digest)

    def encode(self) -> str:
        return self.prefix + self.digest

    def to_bytes(self) -> bytes:
        return (self.prefix + self.digest).encode("ascii")

    def __str__(self):
        return self.encode()


def make_record(fields: IdentityFields) -> DidbRecord:
    return DidbRecord(derive_prefix(fields.date_of_birth),
                      truncated_sha256(canonicalize(fields)))


def parse_record(text: str | bytes) -> DidbRecord:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("ascii")
        except UnicodeDecodeError:
            raise BadDigestAlphabet("record is not ASCII") from None
    if len(text) != RECORD_LEN:
        raise BadLength(f"record must be {RECORD_LEN} chars, got {len(text)}")
    return DidbRecord(check_prefix(text[:PREFIX_LEN]), check_digest(text[PREFIX_LEN:]))
