"""Turn a CIDB CSV export into a versioned DIDB store."""

from __future__ import annotations

import csv
import datetime as dt
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import IdentityFields, make_record
from .errors import AllRowsInvalid, DidbError, InputUnreadable, IoFailure
from .store import Manifest, diff_manifests, pack_encoded, read_manifest, write_store

COLUMNS = ("serial", "name", "date_of_birth", "blood_group", "place_of_birth", "issue_date")


@dataclass
class BuildReport:
    rows: int = 0
    records: int = 0
    duplicates: int = 0
    rejected: list = field(default_factory=list)  # (row number, reason)
    chunks: int = 0
    didb_version: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rejected"] = [{"row": r, "reason": why} for r, why in self.rejected]
        return d


def _open_rows(path: Path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputUnreadable(f"{path}: {exc}") from None
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise InputUnreadable(f"{path}: empty file, header required") from None
    except (UnicodeDecodeError, csv.Error) as exc:
        fh.close()
        raise InputUnreadable(f"{path}: {exc}") from None
    if tuple(h.strip() for h in header) != COLUMNS:
        fh.close()
        raise InputUnreadable(f"{path}: header must be {','.join(COLUMNS)}")
    return fh, reader


def collect_records(cidb_file) -> tuple[list[bytes], BuildReport]:
    """Hash every valid row; return sorted distinct encodings and the report."""
    report = BuildReport()
    seen: set[bytes] = set()
    fh, reader = _open_rows(Path(cidb_file))
    with fh:
        try:
            for rowno, row in enumerate(reader, start=1):
                report.rows += 1
                if len(row) != len(COLUMNS):
                    report.rejected.append((rowno, f"expected {len(COLUMNS)} columns, got {len(row)}"))
                    continue
                try:
                    rec = make_record(IdentityFields.from_strings(*row)).to_bytes()
                except DidbError as exc:
                    report.rejected.append((rowno, f"{type(exc).__name__}: {exc}"))
                    continue
                if rec in seen:
                    report.duplicates += 1
                else:
                    seen.add(rec)
        except (UnicodeDecodeError, csv.Error) as exc:
            raise InputUnreadable(f"{cidb_file}: {exc}") from None
    if report.rows and len(report.rejected) == report.rows:
        raise AllRowsInvalid(f"all {report.rows} rows rejected; first: {report.rejected[0][1]}")
    encoded = sorted(seen)
    report.records = len(encoded)
    return encoded, report


def build(cidb_file, didb_version: int, out_directory) -> tuple[Manifest, BuildReport]:
    if didb_version < 1:
        raise ValueError("didb_version must be positive")
    encoded, report = collect_records(cidb_file)
    chunks = pack_encoded(encoded)
    manifest = write_store(chunks, didb_version, out_directory)
    report.chunks = manifest.chunk_count
    report.didb_version = didb_version
    return manifest, report


def rebuild_incremental(old_store, cidb_file, new_version: int, out_directory):
    """Full deterministic rebuild, then report which chunks differ from ``old_store``."""
    old, _ = read_manifest(old_store)
    if new_version <= old.didb_version:
        raise ValueError(f"new version {new_version} must exceed {old.didb_version}")
    manifest, report = build(cidb_file, new_version, out_directory)
    return manifest, diff_manifests(old, manifest), report


# synthetic data ----------------------------------------------------------

GIVEN = ("Abdul", "Ayesha", "Rahim", "Karim", "Fatema", "Nusrat", "Tanvir", "Sadia",
         "Rafiq", "Jamal", "Nasrin", "Shirin", "Habib", "Farhana", "Imran", "Mitu",
         "Sohel", "Rina", "Kamal", "Laila", "Arif", "Taslima", "Masud", "Ruma",
         "Zahid", "Shapla", "Mahbub", "Parvin", "Jahid", "Sumaiya", "Ada", "Alan")
FAMILY = ("Rahman", "Hossain", "Islam", "Ahmed", "Khan", "Chowdhury", "Sarker",
          "Uddin", "Begum", "Akter", "Miah", "Haque", "Talukder", "Sheikh", "Das",
          "Roy", "Paul", "Karim", "Bhuiyan", "Mollah", "Lovelace", "Turing")
BLOOD = ("A+", "A-", "B+", "B-", "AB+", "AB-", "O+", "O-", "")
PLACES = ("Dhaka", "Chattogram", "Khulna", "Rajshahi", "Sylhet", "Barishal",
          "Rangpur", "Mymensingh", "Cumilla", "Gazipur", "Bogura", "Jashore")

_DOB_START = dt.date(1900, 1, 1).toordinal()
_DOB_END = dt.date(2020, 12, 31).toordinal()
_ISSUE_END = dt.date(2024, 12, 31).toordinal()


def synthetic_rows(count: int, seed: int):
    rng = random.Random(seed)
    serial_base = rng.randrange(10**9, 9 * 10**9)
    for i in range(count):
        dob = rng.randint(_DOB_START, _DOB_END)
        issue = rng.randint(max(dob, dt.date(2008, 1, 1).toordinal()), _ISSUE_END)
        yield (
            str(serial_base + i),
            f"{rng.choice(GIVEN)} {rng.choice(FAMILY)}",
            dt.date.fromordinal(dob).isoformat(),
            rng.choice(BLOOD),
            rng.choice(PLACES),
            dt.date.fromordinal(issue).isoformat(),
        )


def write_rows(rows, out_file) -> Path:
    out_file = Path(out_file)
    try:
        with open(out_file, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"{out_file}: {exc}") from exc
    return out_file


def generate_synthetic_cidb(count: int, seed: int, out_file) -> Path:
    if count < 0:
        raise ValueError("count must be >= 0")
    return write_rows(synthetic_rows(count, seed), out_file)
