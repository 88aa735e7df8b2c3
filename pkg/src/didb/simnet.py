"""Desk-scale network harness: real node and directory processes on localhost.

A :class:`SimNet` owns a directory process, a seed node whose store is built
from synthetic CIDB rows, and follower nodes that replicate from it.  The
``scenario_*`` functions drive the network and return plain-dict reports;
they judge outcomes only from process output (``EVENT`` log lines, client
replies) and on-disk state.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import socket
import subprocess
import sys
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from . import client
from . import protocol as P
from .builder import build, synthetic_rows, write_rows
from .core import RECORD_LEN
from .errors import AllNodesFailed, DidbError, SimTimeout
from .store import (
    CHUNK_DIR,
    MANIFEST_NAME,
    active_directory,
    chunk_filename,
    diff_manifests,
    read_manifest,
    set_current,
    version_dirname,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0
DEFAULT_INTERVAL = 0.5
HOST = "127.0.0.1"


def free_port() -> int:
    with socket.socket() as s:
        s.bind((HOST, 0))
        return s.getsockname()[1]


def wait_port(port: int, timeout: float, proc: subprocess.Popen | None = None) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc is not None and proc.poll() is not None:
            raise DidbError(f"process exited with {proc.returncode} before listening on {port}")
        try:
            with socket.create_connection((HOST, port), timeout=0.5):
                return
        except OSError:
            time.sleep(0.05)
    raise SimTimeout(f"port {port} not listening after {timeout}s")


def read_events(log_path: Path) -> list[dict]:
    out = []
    try:
        text = log_path.read_text(errors="replace")
    except FileNotFoundError:
        return out
    for line in text.splitlines():
        _, sep, payload = line.partition(" EVENT ")
        if sep:
            try:
                out.append(json.loads(payload))
            except ValueError:
                pass
    return out


def store_records(store_dir) -> set[bytes]:
    """Brute-force membership set: every 46-byte record of every chunk file."""
    store_dir = Path(store_dir)
    manifest, _ = read_manifest(store_dir)
    out = set()
    for d in manifest.descriptors:
        data = (store_dir / CHUNK_DIR / chunk_filename(d.index)).read_bytes()
        out.update(data[i:i + RECORD_LEN] for i in range(0, len(data), RECORD_LEN))
    return out


@dataclass
class NodeProc:
    name: str
    root: Path
    verify_port: int
    sync_port: int
    log_path: Path
    args: list
    proc: subprocess.Popen | None = None

    @property
    def address(self) -> str:
        return f"{HOST}:{self.verify_port}"

    @property
    def sync_address(self) -> str:
        return f"{HOST}:{self.sync_port}"

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def manifest_bytes(self) -> bytes | None:
        d = active_directory(self.root)
        if d is None:
            return None
        try:
            return (d / MANIFEST_NAME).read_bytes()
        except OSError:
            return None

    def events(self, kind: str | None = None) -> list[dict]:
        ev = read_events(self.log_path)
        return [e for e in ev if kind is None or e.get("event") == kind]


@dataclass
class SimNet:
    workdir: Path
    seed: int = 0
    interval: float = DEFAULT_INTERVAL
    ttl: float | None = None
    nodes: dict = field(default_factory=dict)
    directory_proc: subprocess.Popen | None = None
    directory_port: int = 0
    rows: list = field(default_factory=list)
    version: int = 0

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        if self.ttl is None:
            self.ttl = 3 * self.interval

    # processes

    def _spawn(self, args, log_path: Path) -> subprocess.Popen:
        cmd = [sys.executable, "-m", *args]
        out = open(log_path, "ab")
        try:
            return subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT)
        finally:
            out.close()

    @property
    def directory_address(self) -> str:
        return f"{HOST}:{self.directory_port}"

    def start_directory(self, timeout: float = 15.0) -> None:
        if not self.directory_port:
            self.directory_port = free_port()
        self.directory_proc = self._spawn(
            ["didb.directory", "--port", str(self.directory_port), "--ttl", str(self.ttl)],
            self.workdir / "directory.log")
        wait_port(self.directory_port, timeout, self.directory_proc)

    def stop_directory(self) -> None:
        if self.directory_proc is not None and self.directory_proc.poll() is None:
            self.directory_proc.terminate()
            self.directory_proc.wait(10)

    def add_node(self, name: str, peers=()) -> NodeProc:
        root = self.workdir / name
        root.mkdir(parents=True, exist_ok=True)
        node = NodeProc(name, root, free_port(), free_port(), self.workdir / f"{name}.log", list(peers))
        self.nodes[name] = node
        return node

    def start_node(self, name: str, wait: bool = True, timeout: float = 30.0,
                   directory: bool = True) -> NodeProc:
        node = self.nodes[name]
        args = ["didb.node", "--store", str(node.root), "--verify-port", str(node.verify_port),
                "--sync-port", str(node.sync_port), "--interval", str(self.interval),
                "--log-file", str(node.log_path)]
        if directory and self.directory_port:
            args += ["--directory", self.directory_address]
        for p in node.args:
            args += ["--peer", p]
        node.proc = self._spawn(args, self.workdir / f"{name}.out")
        if wait:
            wait_port(node.verify_port, timeout, node.proc)
        return node

    def stop_node(self, name: str, kill: bool = False) -> None:
        node = self.nodes[name]
        if node.alive:
            if kill:
                node.proc.kill()
            else:
                node.proc.terminate()
            node.proc.wait(15)

    def close(self) -> None:
        for name in list(self.nodes):
            try:
                self.stop_node(name, kill=True)
            except Exception:
                pass
        if self.directory_proc is not None and self.directory_proc.poll() is None:
            self.directory_proc.kill()
            self.directory_proc.wait(10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # data

    def cidb_path(self, version: int) -> Path:
        return self.workdir / f"cidb-v{version}.csv"

    def build_seed_version(self, version: int) -> Path:
        """Build the current rows as ``version`` into the seed root and make it current."""
        seed = self.nodes["seed"]
        cidb = write_rows(self.rows, self.cidb_path(version))
        rel = version_dirname(version)
        build(cidb, version, seed.root / rel)
        set_current(seed.root, rel)
        self.version = version
        return seed.root / rel

    @property
    def followers(self) -> list[NodeProc]:
        return [n for k, n in self.nodes.items() if k != "seed"]

    def live_nodes(self) -> list[NodeProc]:
        return [n for n in self.nodes.values() if n.alive]

    def wait_converged(self, names, reference: bytes, timeout: float) -> float:
        t0 = time.monotonic()
        pending = set(names)
        while pending:
            for name in list(pending):
                if self.nodes[name].manifest_bytes() == reference:
                    pending.discard(name)
            if not pending:
                break
            if time.monotonic() - t0 > timeout:
                raise SimTimeout(f"nodes {sorted(pending)} not converged after {timeout}s")
            time.sleep(0.05)
        return time.monotonic() - t0


def _store_size(store_dir: Path) -> tuple[int, int]:
    manifest, raw = read_manifest(store_dir)
    return manifest.total_records * RECORD_LEN, len(raw)


def scenario_bootstrap(net: SimNet, n_nodes: int, record_count: int, seed: int = 0,
                       timeout: float = DEFAULT_TIMEOUT, followers_first: bool = False,
                       mesh: bool = True) -> dict:
    """Build a store on the seed and wait for ``n_nodes`` followers to replicate it."""
    net.rows = list(synthetic_rows(record_count, seed))
    seed_node = net.add_node("seed")
    names = [f"f{i}" for i in range(n_nodes)]
    for name in names:
        net.add_node(name)
    for name in names:
        peers = [seed_node.sync_address]
        if mesh:
            peers += [net.nodes[o].sync_address for o in names if o != name]
        net.nodes[name].args = peers
    if not net.directory_proc:
        net.start_directory()
    t_build = time.monotonic()
    store_dir = net.build_seed_version(1)
    build_s = time.monotonic() - t_build
    reference = (store_dir / MANIFEST_NAME).read_bytes()
    store_bytes, manifest_bytes = _store_size(store_dir)

    t0 = time.monotonic()
    if followers_first:
        for name in names:
            net.start_node(name)
        time.sleep(3 * net.interval)
        net.start_node("seed")
    else:
        net.start_node("seed")
        for name in names:
            net.start_node(name, wait=False)
        for name in names:
            wait_port(net.nodes[name].verify_port, 30, net.nodes[name].proc)
    converge_s = net.wait_converged(names, reference, timeout)
    elapsed = time.monotonic() - t0

    bound = (store_bytes + manifest_bytes) * 1.01
    per_node = {}
    for name in names:
        swaps = [e for e in net.nodes[name].events("swap") if e.get("version") == 1]
        received = swaps[-1]["bytes_received"] if swaps else None
        per_node[name] = {"bytes_received": received,
                          "chunks_fetched": swaps[-1]["chunks_fetched"] if swaps else None,
                          "within_bound": received is not None and received <= bound}
    manifests = {n.name: n.manifest_bytes() for n in net.nodes.values()}
    return {
        "scenario": "bootstrap",
        "followers": n_nodes,
        "records": record_count,
        "distinct_records": store_bytes // RECORD_LEN,
        "chunks": read_manifest(store_dir)[0].chunk_count,
        "build_seconds": round(build_s, 3),
        "store_bytes": store_bytes,
        "manifest_bytes": manifest_bytes,
        "transfer_bound_bytes": int(bound),
        "time_to_convergence_s": round(converge_s, 3),
        "elapsed_s": round(elapsed, 3),
        "converged": len(set(manifests.values())) == 1,
        "per_node": per_node,
        "ok": len(set(manifests.values())) == 1 and all(v["within_bound"] for v in per_node.values()),
    }


class _QueryLoad(threading.Thread):
    """Pipelined VERIFY stream against one node, checking every answer."""

    def __init__(self, address: str, probes: list[bytes], oracle: dict[int, set], batch: int = 200):
        super().__init__(daemon=True)
        self.address = P.NodeDescriptor.parse(address)
        self.probes = probes
        self.oracle = oracle
        self.batch = batch
        self.stop = threading.Event()
        self.versions: Counter = Counter()
        self.responses = 0
        self.wrong = 0
        self.errors: list[str] = []

    def run(self):
        try:
            with socket.create_connection((self.address.host, self.address.port), timeout=10) as s:
                rfile = s.makefile("rb")
                i = 0
                while not self.stop.is_set():
                    batch = [self.probes[(i + k) % len(self.probes)] for k in range(self.batch)]
                    i += self.batch
                    s.sendall(b"".join(b"VERIFY " + p + b"\n" for p in batch))
                    for p in batch:
                        resp = P.decode_verification_response(P.read_line(rfile))
                        self.responses += 1
                        self.versions[resp.didb_version] += 1
                        members = self.oracle.get(resp.didb_version)
                        if members is None or (resp.status == P.FOUND) != (p in members):
                            self.wrong += 1
        except Exception as exc:
            self.errors.append(f"{type(exc).__name__}: {exc}")


def scenario_update(net: SimNet, change_fraction: float | None = None, changes: int | None = None,
                    timeout: float = DEFAULT_TIMEOUT, query_load: bool = False,
                    min_responses: int = 10_000) -> dict:
    """Correct some CIDB rows on the seed and measure what followers fetch.

    Corrections change the name field and keep the birth date, so each
    corrected record stays in its birth-month neighbourhood.
    """
    seed_node = net.nodes["seed"]
    old_dir = active_directory(seed_node.root)
    old_manifest, old_raw = read_manifest(old_dir)
    if changes is None:
        changes = round((change_fraction or 0.0) * len(net.rows))
    changes = min(changes, len(net.rows))
    rng = random.Random(net.seed + 1000 + net.version)
    picked = rng.sample(range(len(net.rows)), changes)
    names = [f.name for f in net.followers if f.alive]

    load = None
    old_set = None
    if query_load:
        old_set = store_records(old_dir)
        sample = rng.sample(sorted(old_set), min(500, len(old_set)))
        load_target = net.followers[0]

    if changes == 0:
        if query_load:
            load = _QueryLoad(load_target.address, sample, {old_manifest.didb_version: old_set})
            load.start()
        before = {n: net.nodes[n].events("swap") for n in names}
        time.sleep(5 * net.interval)
        if load:
            load.stop.set()
            load.join(30)
        fetched = {n: sum(e.get("fetched", 0) for e in net.nodes[n].events("swap")[len(before[n]):])
                   for n in names}
        return {"scenario": "update", "changes": 0, "new_version": old_manifest.didb_version,
                "diff_chunks": [], "fetched_per_node": fetched,
                "ok": all(v == 0 for v in fetched.values())}

    for idx in picked:
        row = list(net.rows[idx])
        row[1] = row[1] + " Corrected"
        net.rows[idx] = tuple(row)
    new_version = net.version + 1

    changed_new = changed_old = None
    if query_load:
        from .core import IdentityFields, make_record
        # probes: unchanged records plus the old and new form of every corrected row
        changed_new = [make_record(IdentityFields.from_strings(*net.rows[i])).to_bytes() for i in picked[:50]]

    # build off to the side first so the load thread has both oracles ready
    rel = version_dirname(new_version)
    cidb = write_rows(net.rows, net.cidb_path(new_version))
    new_manifest, _ = build(cidb, new_version, seed_node.root / rel)
    new_dir = seed_node.root / rel
    diff = diff_manifests(old_manifest, new_manifest)
    if query_load:
        new_set = store_records(new_dir)
        changed_old = sorted(old_set - new_set)[:50]
        probes = sample + changed_old + changed_new
        rng.shuffle(probes)
        load = _QueryLoad(load_target.address, probes,
                          {old_manifest.didb_version: old_set, new_version: new_set})
        load.start()
        time.sleep(2 * net.interval)

    before = {n: len(net.nodes[n].events("swap")) for n in names}
    set_current(seed_node.root, rel)
    net.version = new_version
    reference = (new_dir / MANIFEST_NAME).read_bytes()
    converge_s = net.wait_converged(["seed"] + names, reference, timeout)

    if load:
        deadline = time.monotonic() + timeout
        while load.responses < min_responses and time.monotonic() < deadline and load.is_alive():
            time.sleep(0.05)
        # keep querying a little past the swap
        time.sleep(2 * net.interval)
        load.stop.set()
        load.join(30)

    per_node = {}
    for n in names:
        swaps = [e for e in net.nodes[n].events("swap")[before[n]:] if e.get("version") == new_version]
        per_node[n] = {"fetched": swaps[-1]["fetched"] if swaps else None,
                       "swaps": len(swaps)}
    report = {
        "scenario": "update",
        "changes": changes,
        "old_version": old_manifest.didb_version,
        "new_version": new_version,
        "chunks": new_manifest.chunk_count,
        "diff_chunks": diff,
        "fetched_per_node": {n: v["fetched"] for n, v in per_node.items()},
        "time_to_convergence_s": round(converge_s, 3),
        "converged": True,
        "ok": all(v["fetched"] is not None and v["fetched"] <= len(diff) and v["swaps"] == 1
                  for v in per_node.values()),
    }
    if load:
        allowed = {old_manifest.didb_version, new_version}
        unknown = sum(c for v, c in load.versions.items() if v not in allowed)
        report["query_load"] = {
            "responses": load.responses,
            "versions": {str(k): v for k, v in sorted(load.versions.items(), key=lambda kv: str(kv[0]))},
            "unknown_versions": unknown,
            "wrong_answers": load.wrong,
            "errors": load.errors,
        }
        report["ok"] = (report["ok"] and unknown == 0 and load.wrong == 0 and not load.errors
                        and load.responses >= min_responses)
    return report


def _probe_params(net: SimNet, count: int, present: bool, rng: random.Random) -> list[str]:
    members = store_records(active_directory(net.nodes["seed"].root))
    if present:
        return [p.decode() for p in rng.sample(sorted(members), min(count, len(members)))]
    out = []
    while len(out) < count:
        cand = (f"{rng.randint(1900, 2020):04d}{rng.randint(1, 12):02d}"
                f"{rng.getrandbits(160):040x}").encode()
        if cand not in members:
            out.append(cand.decode())
    return out


def scenario_failover(net: SimNet, kill_fraction: float, probes: int = 200,
                      timeout: float = 1.0) -> dict:
    """Kill a fraction of nodes, then verify through the directory with failover."""
    rng = random.Random(net.seed + 2000)
    live = sorted(net.live_nodes(), key=lambda n: n.name)
    # the directory must list every node before the kill
    deadline = time.monotonic() + 10 * net.interval + 5
    while time.monotonic() < deadline:
        listed = {str(n) for n in client.fetch_node_list(P.NodeDescriptor.parse(net.directory_address))}
        if {n.address for n in live} <= listed:
            break
        time.sleep(net.interval / 2)
    n_kill = round(kill_fraction * len(live))
    victims = rng.sample(live, n_kill)
    for v in victims:
        net.stop_node(v.name, kill=True)
    client.clear_cache()
    params = _probe_params(net, probes, True, rng)
    found = failed = other = 0
    attempt_counts = []
    errors = Counter()
    for p in params:
        try:
            res = client.verify_parameter(p, directory=net.directory_address, timeout=timeout, rng=rng)
        except AllNodesFailed as exc:
            failed += 1
            attempt_counts.append(len(exc.attempts))
            errors["AllNodesFailed"] += 1
            continue
        except DidbError as exc:
            other += 1
            errors[type(exc).__name__] += 1
            continue
        attempt_counts.append(len(res.attempts))
        if res.found:
            found += 1
        else:
            other += 1
    survivors = len(live) - n_kill
    mean_attempts = sum(attempt_counts) / len(attempt_counts) if attempt_counts else 0.0
    ok = (found == probes) if survivors else (failed == probes)
    return {
        "scenario": "failover",
        "nodes": len(live),
        "killed": sorted(v.name for v in victims),
        "probes": probes,
        "succeeded": found,
        "all_nodes_failed": failed,
        "other": other,
        "errors": dict(errors),
        "mean_attempts": round(mean_attempts, 3),
        "max_attempts": max(attempt_counts, default=0),
        "ok": ok,
    }


def scenario_offline(net: SimNet, probes: int = 100, target: str | None = None,
                     restart: bool = True) -> dict:
    """Cut a node off from directory and peers; probe it directly."""
    rng = random.Random(net.seed + 3000)
    present = _probe_params(net, probes, True, rng)
    absent = _probe_params(net, probes, False, rng)
    live = [n for n in net.live_nodes() if n.name != "seed"] or net.live_nodes()
    node = net.nodes[target] if target else live[0]
    for other in list(net.live_nodes()):
        if other.name != node.name:
            net.stop_node(other.name)
    net.stop_directory()

    def run_probes():
        res = Counter()
        for p in present:
            res["present_" + _direct(node, p)] += 1
        for p in absent:
            res["absent_" + _direct(node, p)] += 1
        return res

    first = run_probes()
    report = {"scenario": "offline", "node": node.name, "probes": probes,
              "online_peers": len(net.live_nodes()) - 1, "results": dict(first)}
    ok = first["present_FOUND"] == probes and first["absent_NOT_FOUND"] == probes
    if restart:
        net.stop_node(node.name)
        net.start_node(node.name)
        second = run_probes()
        report["after_restart"] = dict(second)
        ok = ok and second["present_FOUND"] == probes and second["absent_NOT_FOUND"] == probes
    report["ok"] = ok
    return report


def _direct(node: NodeProc, parameter: str) -> str:
    try:
        res = client.verify_parameter(parameter, nodes=[node.address], timeout=2.0)
        return res.status
    except AllNodesFailed:
        return "FAILED"


SCENARIOS = ("bootstrap", "update", "failover", "offline", "all")


def run(scenario: str, nodes: int, records: int, seed: int, workdir=None,
        interval: float = DEFAULT_INTERVAL, timeout: float = DEFAULT_TIMEOUT,
        change_fraction: float | None = None, changes: int | None = None,
        kill_fraction: float = 0.5, probes: int | None = None,
        query_load: bool = False) -> dict:
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="didb-sim-")
        workdir = tmp.name
    reports = {}
    try:
        with SimNet(Path(workdir), seed=seed, interval=interval) as net:
            reports["bootstrap"] = scenario_bootstrap(net, nodes, records, seed, timeout)
            if scenario in ("update", "all"):
                if changes is None and change_fraction is None:
                    changes = 1
                reports["update"] = scenario_update(net, change_fraction, changes, timeout,
                                                    query_load=query_load)
            if scenario in ("failover", "all"):
                reports["failover"] = scenario_failover(net, kill_fraction, probes or 200)
            if scenario in ("offline", "all"):
                if scenario == "all":
                    # bring killed nodes back so one can be isolated cleanly
                    for n in net.nodes.values():
                        if not n.alive:
                            net.start_node(n.name)
                    if net.directory_proc is None or net.directory_proc.poll() is not None:
                        net.start_directory()
                reports["offline"] = scenario_offline(net, probes or 100)
    finally:
        if tmp is not None:
            tmp.cleanup()
    reports["ok"] = all(r.get("ok") for r in reports.values() if isinstance(r, dict))
    return reports


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="didb-sim", description="Run a localhost DIDB network scenario.")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--nodes", type=int, default=4, help="follower count")
    ap.add_argument("--records", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--interval", type=float, default=DEFAULT_INTERVAL)
    ap.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    ap.add_argument("--change-fraction", type=float)
    ap.add_argument("--changes", type=int)
    ap.add_argument("--kill-fraction", type=float, default=0.5)
    ap.add_argument("--probes", type=int)
    ap.add_argument("--query-load", action="store_true", help="query a follower during the update")
    ap.add_argument("--workdir", help="keep logs and stores here instead of a temp dir")
    ap.add_argument("--json-report", help="write the report to this file")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        report = run(args.scenario, args.nodes, args.records, args.seed, args.workdir,
                     args.interval, args.timeout, args.change_fraction, args.changes,
                     args.kill_fraction, args.probes, args.query_load)
    except DidbError as exc:
        report = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
    text = json.dumps(report, indent=2, default=str)
    if args.json_report:
        Path(args.json_report).write_text(text + "\n")
    print(text)
    return 0 if report.get("ok") else 1


if __name__ == "__main__":
    raise SystemExit(main())
