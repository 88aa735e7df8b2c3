import hashlib
import random
import shutil
import socket
import socketserver
import threading
import time

import pytest

from conftest import fake_records
from helpers import dead_port, directory, list_nodes, running, send_lines
from oracles import all_records, linear_scan_contains
from didb import protocol as P
from didb.node import Node, NodeConfig, load_config_file
from didb.store import active_directory, pack_encoded, publish, read_manifest, write_store


@pytest.fixture
def nodes():
    started = []

    def make(root, **kw):
        kw.setdefault("interval", 0.1)
        n = Node(NodeConfig(store=root, **kw)).start()
        started.append(n)
        return n

    yield make
    for n in started:
        n.stop()


def wait_for(pred, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.02)
    return False


def sync_exchange(port, frames):
    with socket.create_connection(("127.0.0.1", port), timeout=5) as s:
        s.sendall(b"".join(P.encode_sync(f) for f in frames))
        r = s.makefile("rb")
        return [P.read_sync(r) for _ in frames]


def test_verify_found_and_not_found(nodes, small_store):
    n = nodes(small_store)
    rec = all_records(small_store)[17].decode()
    absent = "190001" + "0" * 40
    assert send_lines(n.verify_server.port, [f"VERIFY {rec}", f"VERIFY {absent}", "VERIFY nope", "junk"]) == [
        "FOUND 1", "NOT_FOUND 1", "ERR BAD_PARAM", "ERR BAD_PARAM"]


def test_not_ready_without_store(nodes, tmp_path):
    n = nodes(tmp_path / "empty")
    rec = fake_records(1)[0].decode()
    assert send_lines(n.verify_server.port, [f"VERIFY {rec}"]) == ["ERR NOT_READY"]
    assert sync_exchange(n.sync_server.port, [P.ManifestRequest()]) == [P.SyncError("NOT_READY")]


def test_concurrent_probes_match_oracle(nodes, tmp_path_factory):
    from didb.builder import build, generate_synthetic_cidb
    d = tmp_path_factory.mktemp("big")
    generate_synthetic_cidb(100_000, 3, d / "c.csv")
    build(d / "c.csv", 1, d / "s")
    n = nodes(d / "s")
    members = all_records(d / "s")
    member_set = set(members)
    rng = random.Random(1)
    probes = rng.sample(members, 500) + [
        f"{rng.randint(1900, 2020):04d}{rng.randint(1, 12):02d}{rng.getrandbits(160):040x}".encode()
        for _ in range(500)]
    socks = [socket.create_connection(("127.0.0.1", n.verify_server.port), timeout=30) for _ in probes]
    try:
        for s, p in zip(socks, probes):
            s.sendall(b"VERIFY " + p + b"\n")
        answers = [s.makefile("rb").readline().decode().strip() for s in socks]
    finally:
        for s in socks:
            s.close()
    # membership set here is the file contents; spot-check it against the linear scan
    for p in probes[::100]:
        assert (p in member_set) == linear_scan_contains(d / "s", p)
    assert answers == [("FOUND 1" if p in member_set else "NOT_FOUND 1") for p in probes]


def test_serve_sync(nodes, tmp_path):
    recs = fake_records(9 * 50)
    write_store(pack_encoded(recs), 5, tmp_path / "s")
    n = nodes(tmp_path / "s")
    raw = (tmp_path / "s" / "MANIFEST").read_bytes()
    hello, man = sync_exchange(n.sync_server.port, [P.Hello(), P.ManifestRequest()])
    assert hello == P.Hello(1) and man == P.ManifestData(raw)
    m, _ = read_manifest(tmp_path / "s")
    frames = [P.GetChunk(d.index) for d in m.descriptors] + [P.GetChunk(999999)]
    replies = sync_exchange(n.sync_server.port, frames)
    for d, r in zip(m.descriptors, replies):
        assert hashlib.sha256(r.data).hexdigest() == d.checksum
    assert replies[-1] == P.SyncError("NO_SUCH_CHUNK")


def test_sync_server_bad_request(nodes, small_store):
    n = nodes(small_store)
    with socket.create_connection(("127.0.0.1", n.sync_server.port), timeout=5) as s:
        s.sendall(b"BOGUS\n")
        assert P.read_sync(s.makefile("rb")) == P.SyncError("BAD_REQUEST")


def _big_versions(tmp_path):
    recs = fake_records(300_000)
    write_store(pack_encoded(recs), 1, tmp_path / "v1")
    edited = list(recs)
    # same-position edit inside chunk 1: bump the last hex digit of one record
    i = 150_000
    r = edited[i]
    for c in "0123456789abcdef":
        cand = r[:-1] + c.encode()
        if edited[i - 1] < cand < edited[i + 1] and cand != r:
            edited[i] = cand
            break
    write_store(pack_encoded(edited), 2, tmp_path / "v2")
    return recs, edited


def test_bootstrap_and_incremental_sync(nodes, tmp_path):
    recs, edited = _big_versions(tmp_path)
    seed_root = tmp_path / "seed"
    seed_root.mkdir()
    publish(tmp_path / "v1", seed_root)
    seed = nodes(seed_root)
    follower = nodes(tmp_path / "f", peers=[f"127.0.0.1:{seed.sync_server.port}"])
    assert wait_for(lambda: follower.handle.version == 1)
    assert (active_directory(tmp_path / "f") / "MANIFEST").read_bytes() == \
        (tmp_path / "v1" / "MANIFEST").read_bytes()
    assert follower.chunks_fetched == 3
    publish(tmp_path / "v2", seed_root)
    assert wait_for(lambda: follower.handle.version == 2)
    assert follower.chunks_fetched == 4  # exactly one more chunk
    assert follower.handle.lookup(edited[150_000]) == (True, 2)
    assert follower.handle.lookup(recs[150_000]) == (False, 2)


class _CorruptPeer(socketserver.StreamRequestHandler):
    def handle(self):
        store = self.server.store
        while True:
            msg = P.read_sync(self.rfile)
            if msg is None:
                return
            if isinstance(msg, P.Hello):
                reply = P.Hello()
            elif isinstance(msg, P.ManifestRequest):
                reply = P.ManifestData((store / "MANIFEST").read_bytes())
            else:
                data = bytearray((store / "chunks" / f"{msg.index:06d}.didb").read_bytes())
                data[7] ^= 1
                self.server.served += 1
                reply = P.ChunkData(msg.index, bytes(data))
            self.wfile.write(P.encode_sync(reply))


def test_corrupt_peer_never_activated(nodes, tmp_path):
    write_store(pack_encoded(fake_records(100)), 1, tmp_path / "v1")
    srv = socketserver.ThreadingTCPServer(("127.0.0.1", 0), _CorruptPeer)
    srv.daemon_threads = True
    srv.store, srv.served = tmp_path / "v1", 0
    with running(srv):
        n = nodes(tmp_path / "f", peers=[f"127.0.0.1:{srv.server_address[1]}"])
        assert wait_for(lambda: srv.served >= 8)
        assert n.handle.version is None
        assert active_directory(tmp_path / "f") is None


def test_heartbeat_listing_and_expiry(nodes, tmp_path, small_store):
    with directory(ttl=0.5) as d:
        n = nodes(small_store, directory=f"127.0.0.1:{d.port}")
        me = f"127.0.0.1:{n.verify_server.port}"
        assert wait_for(lambda: me in list_nodes(d.port))
        n.stop()
        assert wait_for(lambda: list_nodes(d.port) == [], timeout=5)


def test_offline_serving(nodes, small_store):
    n = nodes(small_store, directory=f"127.0.0.1:{dead_port()}", peers=[f"127.0.0.1:{dead_port()}"])
    time.sleep(0.3)
    rec = all_records(small_store)[3].decode()
    assert send_lines(n.verify_server.port, [f"VERIFY {rec}"]) == ["FOUND 1"]


def test_local_publish_adopted(nodes, tmp_path):
    recs, edited = _big_versions(tmp_path)
    root = tmp_path / "root"
    root.mkdir()
    publish(tmp_path / "v1", root)
    n = nodes(root)
    assert n.handle.version == 1
    publish(tmp_path / "v2", root)
    assert wait_for(lambda: n.handle.version == 2)


def test_corrupt_local_store_starts_not_ready(nodes, tmp_path):
    write_store(pack_encoded(fake_records(100)), 1, tmp_path / "s")
    p = tmp_path / "s" / "chunks" / "000000.didb"
    p.write_bytes(b"0" + p.read_bytes()[1:])
    n = nodes(tmp_path / "s")
    assert n.handle.version is None


def test_stop_drains_idle_connections(small_store):
    n = Node(NodeConfig(store=small_store, interval=0.1)).start()
    idle = socket.create_connection(("127.0.0.1", n.verify_server.port))
    time.sleep(0.1)
    t0 = time.monotonic()
    n.stop()
    assert time.monotonic() - t0 < 3
    idle.close()


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        NodeConfig(store=tmp_path, verify_port=5000, sync_port=5000)
    with pytest.raises(ValueError):
        NodeConfig(store=tmp_path, interval=0)
    cfg = tmp_path / "node.conf"
    cfg.write_text('store = "/tmp/x"  # root\nverify_port = 7000\nsync-port = 7001\n'
                   'peers = ["127.0.0.1:8001", "127.0.0.1:8002"]\ninterval = 2.5\ndirectory = 127.0.0.1:9000\n')
    settings = load_config_file(cfg)
    c = NodeConfig(**settings)
    assert c.verify_port == 7000 and c.sync_port == 7001 and c.interval == 2.5
    assert [str(p) for p in c.peers] == ["127.0.0.1:8001", "127.0.0.1:8002"]
    assert str(c.directory) == "127.0.0.1:9000"
