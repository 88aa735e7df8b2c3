"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line, collected in the ``acceptance``
section of the pytest terminal summary.
"""

import csv
import io
import json
import random
import subprocess
import sys
import time
from pathlib import Path

import pytest

from conftest import record_acceptance
from helpers import directory, list_nodes, send_lines
from oracles import all_records, linear_scan_contains
from didb import protocol as P
from didb.builder import build, generate_synthetic_cidb
from didb.client import AllNodesFailed, build_parameter, clear_cache, verify
from didb.core import IdentityFields, parse_record
from didb.errors import DidbError
from didb.node import Node, NodeConfig
from didb.simnet import SimNet, scenario_bootstrap, scenario_failover, scenario_offline, scenario_update
from didb.store import CHUNK_CAPACITY, validate_store

pytestmark = pytest.mark.slow


def _files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_1_sizing_golden_suite():
    t0 = time.monotonic()
    p = subprocess.run([sys.executable, "-m", "didb.sizing", "--paper", "--json"],
                       capture_output=True, text=True)
    elapsed = time.monotonic() - t0
    rows = json.loads(p.stdout)
    worst = max(r["rel_error"] for r in rows)
    ok = p.returncode == 0 and len(rows) == 8 and worst < 1e-9 and elapsed < 1.0
    assert record_acceptance(1, ok, f"{len(rows)} published figures, worst rel.err {worst:.1e}, "
                                    f"{elapsed:.2f} s")


def test_2_size_law_one_million(tmp_path):
    t0 = time.monotonic()
    cidb = generate_synthetic_cidb(1_000_000, 2024, tmp_path / "c.csv")
    manifest, report = build(cidb, 1, tmp_path / "s")
    elapsed = time.monotonic() - t0
    chunk_files = sorted((tmp_path / "s" / "chunks").glob("*.didb"))
    total = sum(p.stat().st_size for p in chunk_files)
    distinct = len(set(all_records(tmp_path / "s")))
    expected_chunks = -(-distinct // CHUNK_CAPACITY)
    ok = (total == 46 * distinct and distinct == 1_000_000 and len(chunk_files) == 9
          and manifest.chunk_count == expected_chunks == 9 and elapsed < 120)
    assert record_acceptance(2, ok, f"{total} bytes == 46 x {distinct}, {len(chunk_files)} chunks, "
                                    f"{elapsed:.1f} s")


def _cidb_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        return [tuple(row) for row in r]


def test_3_membership_oracle_equivalence(small_cidb, small_store):
    t0 = time.monotonic()
    rng = random.Random(3)
    rows = _cidb_rows(small_cidb)
    present = [IdentityFields.from_strings(*r) for r in rng.sample(rows, 1000)]
    absent = []
    for r in rng.sample(rows, 1000):
        r = list(r)
        r[0] = r[0] + "9"  # a serial that was never issued
        absent.append(IdentityFields.from_strings(*r))
    clear_cache()
    agree = 0
    with directory() as d:
        node = Node(NodeConfig(store=small_store, directory=f"127.0.0.1:{d.port}", interval=0.2)).start()
        try:
            deadline = time.monotonic() + 10
            while not list_nodes(d.port) and time.monotonic() < deadline:
                time.sleep(0.05)
            for fields in present + absent:
                res = verify(fields, directory=f"127.0.0.1:{d.port}")
                truth = linear_scan_contains(small_store, build_parameter(fields).encode())
                agree += res.found == truth
            n_present_true = sum(linear_scan_contains(small_store, build_parameter(f).encode())
                                 for f in present[:50])
        finally:
            node.stop()
            clear_cache()
    elapsed = time.monotonic() - t0
    ok = agree == 2000 and n_present_true == 50 and elapsed < 60
    assert record_acceptance(3, ok, f"{agree}/2000 answers match the linear scan, {elapsed:.1f} s")


def test_4_determinism(small_cidb, tmp_path):
    build(small_cidb, 3, tmp_path / "a")
    build(small_cidb, 3, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    ok = a == b and "MANIFEST" in a and len(a) > 1
    assert record_acceptance(4, ok, f"{len(a)} files bitwise identical")


def test_5_corruption_detection(tmp_path):
    from conftest import fake_records
    from didb.store import pack_encoded, write_store
    write_store(pack_encoded(fake_records(3 * CHUNK_CAPACITY - 500)), 1, tmp_path / "s")
    chunks = sorted((tmp_path / "s" / "chunks").glob("*.didb"))
    rng = random.Random(5)
    exact = 0
    for _ in range(100):
        idx = rng.randrange(len(chunks))
        path = chunks[idx]
        original = path.read_bytes()
        data = bytearray(original)
        pos = rng.randrange(len(data))
        data[pos] ^= rng.randrange(1, 256)
        path.write_bytes(bytes(data))
        try:
            exact += validate_store(tmp_path / "s") == [idx]
        finally:
            path.write_bytes(original)
    clean = validate_store(tmp_path / "s") == []
    assert record_acceptance(5, exact == 100 and clean, f"{exact}/100 flips flagged on exactly their chunk")


@pytest.fixture(scope="module")
def boot_net(tmp_path_factory):
    with SimNet(tmp_path_factory.mktemp("net6"), seed=6) as net:
        report = scenario_bootstrap(net, 4, 100_000, seed=6, timeout=60)
        yield net, report


def test_6_sync_convergence(boot_net):
    _, rep = boot_net
    worst = max(v["bytes_received"] or 0 for v in rep["per_node"].values())
    ok = (rep["converged"] and rep["time_to_convergence_s"] < 60 and len(rep["per_node"]) == 4
          and all(v["within_bound"] for v in rep["per_node"].values()))
    assert record_acceptance(6, ok, f"4 followers converged in {rep['time_to_convergence_s']} s, "
                                    f"max {worst} B received <= bound {rep['transfer_bound_bytes']} B")


def test_7_incremental_update(tmp_path):
    with SimNet(tmp_path / "net7", seed=7) as net:
        boot = scenario_bootstrap(net, 2, 1_000_000, seed=7, timeout=60)
        rep = scenario_update(net, changes=1, timeout=60)
    fetched = rep["fetched_per_node"]
    ok = (boot["ok"] and rep["chunks"] >= 9 and rep["ok"]
          and all(v is not None and v <= 2 for v in fetched.values()))
    assert record_acceptance(7, ok, f"{rep['chunks']} chunks, diff {rep['diff_chunks']}, "
                                    f"fetched per follower {fetched}")


def test_8_failover(tmp_path):
    with SimNet(tmp_path / "net8", seed=8) as net:
        scenario_bootstrap(net, 3, 10_000, seed=8)
        half = scenario_failover(net, 0.5, probes=200)
        everyone = scenario_failover(net, 1.0, probes=200)
    ok = (half["nodes"] == 4 and len(half["killed"]) == 2 and half["succeeded"] == 200
          and everyone["all_nodes_failed"] == 200)
    assert record_acceptance(8, ok, f"half killed: {half['succeeded']}/200 ok "
                                    f"(mean {half['mean_attempts']} attempts); "
                                    f"all killed: {everyone['all_nodes_failed']}/200 AllNodesFailed")


def test_9_offline_service(tmp_path):
    with SimNet(tmp_path / "net9", seed=9) as net:
        scenario_bootstrap(net, 2, 10_000, seed=9)
        rep = scenario_offline(net, probes=100)
    first = rep["results"]
    ok = rep["ok"] and first.get("present_FOUND") == 100 and first.get("absent_NOT_FOUND") == 100
    assert record_acceptance(9, ok, f"isolated node: {first.get('present_FOUND')}/100 FOUND, "
                                    f"{first.get('absent_NOT_FOUND')}/100 NOT_FOUND; "
                                    f"after restart {rep.get('after_restart')}")


def test_10_atomic_swap_under_load(boot_net):
    net, _ = boot_net
    rep = scenario_update(net, changes=25, timeout=60, query_load=True, min_responses=10_000)
    q = rep["query_load"]
    ok = (rep["ok"] and q["responses"] >= 10_000 and q["unknown_versions"] == 0
          and q["wrong_answers"] == 0 and not q["errors"])
    assert record_acceptance(10, ok, f"{q['responses']} responses, versions {q['versions']}, "
                                     f"{q['unknown_versions']} unknown, {q['wrong_answers']} wrong")


# criterion 11 ---------------------------------------------------------------

_SEEDS = [
    b"VERIFY 198012353018eb58ffb06e3116044d856efb58374f96e5",
    b"FOUND 12", b"NOT_FOUND 3", b"ERR BAD_PARAM", b"ERR NOT_READY",
    b"HELLO 1", b"MANIFEST", b"GET_CHUNK 3", b"CHUNK 0 5\nabcde", b"MANIFEST 3\nabc",
    b"ERR NO_SUCH_CHUNK", b"REGISTER 9000", b"LIST", b"PING", b"OK", b"PONG",
    b"10.0.0.5:9000\n10.0.0.6:9001\nEND", b"ERR BAD_REQUEST",
]


def _mutate(rng: random.Random, seed: bytes) -> bytes:
    data = bytearray(seed)
    for _ in range(rng.randint(1, 4)):
        op = rng.randrange(5)
        if op == 0 and data:
            data[rng.randrange(len(data))] = rng.randrange(256)
        elif op == 1:
            data.insert(rng.randrange(len(data) + 1), rng.randrange(256))
        elif op == 2 and data:
            del data[rng.randrange(len(data))]
        elif op == 3:
            data = data[:rng.randrange(len(data) + 1)]
        else:
            data += rng.choice([b" ", b"\n", b"\r", b"\x00", b"-1", b"99999999999999999999", b"\xff"])
    return bytes(data)


def _fuzz_inputs(rng: random.Random, n: int) -> list[bytes]:
    out = []
    for i in range(n):
        if i % 3 == 0:
            out.append(rng.randbytes(rng.randrange(0, 200)))
        else:
            out.append(_mutate(rng, rng.choice(_SEEDS)))
    return out


DECODERS = {
    "decode_verification_request": P.decode_verification_request,
    "decode_verification_response": P.decode_verification_response,
    "decode_sync": P.decode_sync,
    "read_sync": lambda b: P.read_sync(io.BytesIO(b)),
    "decode_directory_request": P.decode_directory_request,
    "decode_directory_response": lambda b: P.decode_directory_response(b.split(b"\n")),
    "parse_record": parse_record,
}


def test_11_protocol_robustness(small_store):
    rng = random.Random(11)
    crashes = {}
    structured = accepted = 0
    for name, decode in DECODERS.items():
        crashes[name] = 0
        for data in _fuzz_inputs(rng, 10_000):
            try:
                decode(data)
                accepted += 1
            except DidbError:
                structured += 1
            except Exception:
                crashes[name] += 1
    # the live servers must stay up and keep answering after garbage
    node = Node(NodeConfig(store=small_store, interval=0.2)).start()
    try:
        garbage = [x.replace(b"\n", b" ") for x in _fuzz_inputs(rng, 300)]
        import socket
        for port in (node.verify_server.port, node.sync_server.port):
            with socket.create_connection(("127.0.0.1", port), timeout=5) as s:
                s.sendall(b"\n".join(garbage) + b"\n")
                s.shutdown(socket.SHUT_WR)
                while s.recv(65536):
                    pass
        rec = all_records(small_store)[0].decode()
        alive = send_lines(node.verify_server.port, [f"VERIFY {rec}"]) == ["FOUND 1"]
    finally:
        node.stop()
    total = sum(crashes.values())
    ok = total == 0 and alive
    assert record_acceptance(11, ok, f"{len(DECODERS)} decoders x 10000 inputs: {total} crashes, "
                                     f"{structured} structured errors, {accepted} accepted; "
                                     f"servers alive after garbage: {alive}")
