"""Capacity arithmetic for a DIDB deployment.

Units are binary throughout (1 MB = 1024**2 bytes, 1 GB = 1024**3 bytes).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from decimal import Decimal

RECORD_BYTES = 46
CHECKSUM_BYTES = 64
KB = 1024
MB = 1024**2
GB = 1024**3


def didb_size_bytes(n: int) -> int:
    if n < 0:
        raise ValueError("record count must be >= 0")
    return RECORD_BYTES * n


def annual_growth(records_per_year: int, years: float, published_rounding: bool = False) -> float:
    """Store growth in bytes after ``years``.

    With ``published_rounding`` the yearly growth is first rounded to whole
    megabytes and then compounded, the way the published estimate was made.
    """
    if records_per_year < 0 or years < 0:
        raise ValueError("inputs must be non-negative")
    per_year = didb_size_bytes(records_per_year)
    if published_rounding:
        per_year = round(per_year / MB) * MB
    return per_year * years


def chunk_count(total_bytes: float, chunk_bytes: float) -> int:
    if chunk_bytes <= 0:
        raise ValueError("chunk size must be > 0")
    if total_bytes <= 0:
        return 0
    return math.ceil(total_bytes / chunk_bytes)


def checksum_storage(files: int, bytes_per_checksum: int = CHECKSUM_BYTES) -> int:
    if files < 0 or bytes_per_checksum < 0:
        raise ValueError("inputs must be non-negative")
    return files * bytes_per_checksum


def sync_time(total_bytes: float, bytes_per_second: float) -> float:
    """Hours to transfer ``total_bytes`` at a steady rate."""
    if bytes_per_second <= 0:
        raise ValueError("rate must be > 0")
    return total_bytes / bytes_per_second / 3600


@dataclass(frozen=True)
class FleetCapacity:
    nodes: int
    requests_per_s: float


def fleet_capacity(machines: int, participation_fraction: float,
                   requests_per_node_per_s: float) -> FleetCapacity:
    if not 0 <= participation_fraction <= 1:
        raise ValueError("participation fraction must be in [0, 1]")
    nodes = round(machines * participation_fraction)
    return FleetCapacity(nodes, nodes * requests_per_node_per_s)


# published scenarios --------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    value: float
    printed: str  # figure as published, digits preserved
    unit: str

    @property
    def expected(self) -> float:
        return float(self.printed)

    @property
    def decimals(self) -> int:
        exp = Decimal(self.printed).as_tuple().exponent
        return -exp if exp < 0 else 0

    @property
    def at_printed_precision(self) -> float:
        return round(self.value, self.decimals)

    @property
    def rel_error(self) -> float:
        """Relative error of the value rounded to the published number of decimals."""
        return abs(self.at_printed_precision - self.expected) / abs(self.expected)

    @property
    def raw_rel_error(self) -> float:
        return abs(self.value - self.expected) / abs(self.expected)


def published_scenarios() -> list[Scenario]:
    fleet = fleet_capacity(27_440, 0.01, 100)
    return [
        Scenario("store size, 170M identities", didb_size_bytes(170_000_000) / GB, "7.28294253349", "GB"),
        Scenario("yearly growth, 3M identities", didb_size_bytes(3_000_000) / MB, "131.607055664", "MB/yr"),
        Scenario("growth over 10 years (132 MB/yr)",
                 annual_growth(3_000_000, 10, published_rounding=True) / GB, "1.2890625", "GB"),
        Scenario("chunks of 4.9 MB in 7.30 GB", chunk_count(7.30 * GB, 4.9 * MB), "1526", "files"),
        Scenario("checksum list, 1526 chunks", checksum_storage(1526) / MB, "0.09313964843", "MB"),
        Scenario("sync of 10 GB at 1 MB/s", sync_time(10 * GB, 1 * MB), "2.844", "h"),
        Scenario("fleet nodes, 1% of 27440 machines", fleet.nodes, "274", "nodes"),
        Scenario("fleet capacity at 100 req/s/node", fleet.requests_per_s, "27400", "req/s"),
    ]


def _print_table(rows, file=sys.stdout):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip(), file=file)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="didb-size", description="DIDB capacity calculator.")
    ap.add_argument("--records", type=int, help="identity count")
    ap.add_argument("--chunk-mb", type=float, default=4.9)
    ap.add_argument("--rate-mbps", type=float, default=1.0, help="sync rate in MB/s")
    ap.add_argument("--growth", type=int, default=0, help="new identities per year")
    ap.add_argument("--years", type=float, default=10)
    ap.add_argument("--machines", type=int, default=0)
    ap.add_argument("--fraction", type=float, default=0.01)
    ap.add_argument("--per-node", type=float, default=100.0, help="requests/s per node")
    ap.add_argument("--paper", action="store_true", help="print the published scenarios with expected values")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    if args.paper:
        scen = published_scenarios()
        ok = all(s.rel_error < 1e-9 for s in scen)
        if args.json:
            print(json.dumps([{"name": s.name, "value": s.value, "expected": s.expected,
                               "unit": s.unit, "rel_error": s.rel_error,
                               "pass": s.rel_error < 1e-9} for s in scen], indent=2))
        else:
            rows = [("scenario", "computed", "expected", "unit", "rel.err", "")]
            rows += [(s.name, repr(s.value), s.printed, s.unit, f"{s.rel_error:.1e}",
                      "ok" if s.rel_error < 1e-9 else "FAIL") for s in scen]
            _print_table(rows)
        return 0 if ok else 1

    if args.records is None:
        ap.error("--records or --paper is required")
    size = didb_size_bytes(args.records)
    chunks = chunk_count(size, args.chunk_mb * MB)
    rows = [
        ("quantity", "value"),
        ("records", args.records),
        ("store bytes", size),
        ("store GB", f"{size / GB:.6f}"),
        (f"chunks ({args.chunk_mb} MB)", chunks),
        ("checksum list bytes", checksum_storage(chunks)),
        (f"full sync at {args.rate_mbps} MB/s (h)", f"{sync_time(size, args.rate_mbps * MB):.4f}"),
    ]
    if args.growth:
        rows.append((f"growth over {args.years:g} years (GB)",
                     f"{annual_growth(args.growth, args.years) / GB:.6f}"))
    if args.machines:
        fleet = fleet_capacity(args.machines, args.fraction, args.per_node)
        rows += [("fleet nodes", fleet.nodes), ("fleet req/s", f"{fleet.requests_per_s:g}")]
    if args.json:
        print(json.dumps(dict(rows[1:])))
    else:
        _print_table(rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
