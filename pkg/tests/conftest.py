import datetime as dt
import hashlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from didb.core import IdentityFields  # noqa: E402
from didb.builder import build, generate_synthetic_cidb  # noqa: E402

ADA_RECORD = "198012353018eb58ffb06e3116044d856efb58374f96e5"


@pytest.fixture
def ada():
    return IdentityFields(
        serial="123",
        name=" Ada  Lovelace ",
        date_of_birth=dt.date(1980, 12, 5),
        blood_group="b+",
        place_of_birth="Dhaka",
        issue_date=dt.date(2016, 10, 2),
    )


def fake_records(n: int, prefix_span: int = 120) -> list[bytes]:
    """``n`` distinct sorted 46-byte records without going through the CSV path."""
    out = []
    for i in range(n):
        year = 1900 + (i % prefix_span)
        month = 1 + (i // prefix_span) % 12
        digest = hashlib.sha256(i.to_bytes(8, "big")).hexdigest()[:40]
        out.append(f"{year:04d}{month:02d}{digest}".encode())
    out.sort()
    return out


@pytest.fixture(scope="session")
def small_cidb(tmp_path_factory):
    path = tmp_path_factory.mktemp("cidb") / "cidb.csv"
    generate_synthetic_cidb(10_000, 7, path)
    return path


@pytest.fixture(scope="session")
def small_store(tmp_path_factory, small_cidb):
    out = tmp_path_factory.mktemp("store") / "s"
    build(small_cidb, 1, out)
    return out


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
