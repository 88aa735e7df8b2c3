"""Private node daemon: local store, peer sync, and the verification server.

Four activities share one :class:`~didb.store.StoreHandle`:

* the verification server answers ``VERIFY`` lines from the active snapshot;
* the sync server hands the active manifest and chunks to peers;
* the sync loop polls peers, pulls changed chunks and swaps versions;
* the heartbeat re-registers the verification port with the directory.

Sync decisions and swaps are logged as ``EVENT {json}`` lines.
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import os
import random
import shutil
import signal
import socket
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol as P
from .errors import DidbError, ProtocolError, StaleVersion, StoreNotLoaded, ValidationFailed
from .store import (
    CHUNK_DIR,
    MANIFEST_NAME,
    LoadedStore,
    Manifest,
    StoreHandle,
    active_directory,
    chunk_filename,
    diff_manifests,
    load_store,
    read_manifest,
    set_current,
    sha256_hex,
    version_dirname,
)

log = logging.getLogger(__name__)

DEFAULT_INTERVAL = 10.0
CHUNK_RETRY_BUDGET = 3
CONNECT_TIMEOUT = 5.0
IO_TIMEOUT = 30.0


def event(kind: str, **fields) -> None:
    log.info("EVENT %s", json.dumps({"event": kind, "t": round(time.time(), 3), **fields},
                                     sort_keys=True))


@dataclass
class NodeConfig:
    store: Path
    verify_port: int = 0
    sync_port: int = 0
    directory: P.NodeDescriptor | None = None
    peers: list = field(default_factory=list)
    interval: float = DEFAULT_INTERVAL
    host: str = "127.0.0.1"

    def __post_init__(self):
        self.store = Path(self.store)
        if self.verify_port and self.verify_port == self.sync_port:
            raise ValueError("verify and sync ports must differ")
        if not self.interval > 0:
            raise ValueError("interval must be > 0")
        if isinstance(self.directory, str):
            self.directory = P.NodeDescriptor.parse(self.directory)
        self.peers = [P.NodeDescriptor.parse(p) if isinstance(p, str) else p for p in self.peers]


def load_config_file(path) -> dict:
    """Parse a flat ``key = value`` file (TOML-style scalars and lists)."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = key.strip().replace("-", "_"), value.strip()
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


class _CountingReader:
    """Wraps a binary stream and counts bytes read through it."""

    def __init__(self, raw):
        self._raw = raw
        self.count = 0

    def readline(self, limit=-1):
        data = self._raw.readline(limit)
        self.count += len(data)
        return data

    def read(self, n=-1):
        data = self._raw.read(n)
        self.count += len(data)
        return data


# servers ------------------------------------------------------------------

class _DrainingServer(socketserver.ThreadingTCPServer):
    """Threaded server whose shutdown half-closes live connections and joins handlers."""

    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True
    request_queue_size = 1024

    def __init__(self, address, handler, node: "Node"):
        self.node = node
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        super().__init__(address, handler)

    def process_request(self, request, client_address):
        with self._conns_lock:
            self._conns.add(request)
        super().process_request(request, client_address)

    def shutdown_request(self, request):
        with self._conns_lock:
            self._conns.discard(request)
        super().shutdown_request(request)

    def drain(self):
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RD)
            except OSError:
                pass

    @property
    def port(self) -> int:
        return self.server_address[1]


class _VerifyHandler(socketserver.StreamRequestHandler):
    def handle(self):
        handle: StoreHandle = self.server.node.handle
        while True:
            try:
                line = self.rfile.readline(P.MAX_LINE + 1)
            except OSError:
                return
            if not line:
                return
            try:
                if not line.endswith(b"\n"):
                    raise ProtocolError("unterminated line")
                req = P.decode_verification_request(line)
                found, version = handle.lookup(req.parameter.encode("ascii"))
                resp = P.VerifyResponse(P.FOUND if found else P.NOT_FOUND, version)
            except ProtocolError:
                resp = P.VerifyResponse(P.ERR, error_code="BAD_PARAM")
            except StoreNotLoaded:
                resp = P.VerifyResponse(P.ERR, error_code="NOT_READY")
            except Exception:
                log.exception("verification failed")
                resp = P.VerifyResponse(P.ERR, error_code="INTERNAL")
            try:
                self.wfile.write((P.encode_verification(resp) + "\n").encode())
            except OSError:
                return


class _SyncHandler(socketserver.StreamRequestHandler):
    def handle(self):
        handle: StoreHandle = self.server.node.handle
        pinned: LoadedStore | None = None
        while True:
            try:
                msg = P.read_sync(self.rfile)
            except ProtocolError:
                self._send(P.SyncError("BAD_REQUEST"))
                return
            except OSError:
                return
            if msg is None:
                return
            if isinstance(msg, P.Hello):
                reply = P.Hello(P.PROTOCOL_VERSION)
            elif isinstance(msg, P.ManifestRequest):
                # chunks requested later in this session come from the same snapshot
                pinned = handle.active
                reply = (P.SyncError("NOT_READY") if pinned is None
                         else P.ManifestData(pinned.manifest_bytes))
            elif isinstance(msg, P.GetChunk):
                snap = pinned or handle.active
                if snap is None:
                    reply = P.SyncError("NOT_READY")
                elif msg.index >= snap.manifest.chunk_count:
                    reply = P.SyncError("NO_SUCH_CHUNK")
                else:
                    reply = P.ChunkData(msg.index, snap.chunk_bytes(msg.index))
            else:
                reply = P.SyncError("BAD_REQUEST")
            if not self._send(reply):
                return

    def _send(self, msg) -> bool:
        try:
            self.wfile.write(P.encode_sync(msg))
            return True
        except OSError:
            return False


# node ---------------------------------------------------------------------

class SyncAborted(DidbError):
    pass


class Node:
    def __init__(self, config: NodeConfig):
        self.config = config
        self.handle = StoreHandle()
        self.stop_event = threading.Event()
        self.bytes_received = 0
        self.chunks_fetched = 0
        self._threads: list[threading.Thread] = []
        self.verify_server: _DrainingServer | None = None
        self.sync_server: _DrainingServer | None = None
        self._load_initial()

    def _load_initial(self):
        directory = active_directory(self.config.store)
        if directory is None:
            log.info("no local store under %s; NOT_READY until synced", self.config.store)
            return
        try:
            self.handle.activate(load_store(directory))
            event("load", version=self.handle.version, directory=str(directory))
        except (ValidationFailed, DidbError, OSError) as exc:
            log.warning("local store %s unusable: %s", directory, exc)

    # lifecycle

    def start(self) -> "Node":
        cfg = self.config
        self.verify_server = _DrainingServer((cfg.host, cfg.verify_port), _VerifyHandler, self)
        self.sync_server = _DrainingServer((cfg.host, cfg.sync_port), _SyncHandler, self)
        for srv in (self.verify_server, self.sync_server):
            self._spawn(srv.serve_forever, kwargs={"poll_interval": 0.1})
        self._spawn(self._sync_loop)
        if cfg.directory is not None:
            self._spawn(self._heartbeat_loop)
        event("start", verify_port=self.verify_server.port, sync_port=self.sync_server.port,
              version=self.handle.version, pid=os.getpid())
        return self

    def _spawn(self, target, kwargs=None):
        t = threading.Thread(target=target, kwargs=kwargs or {}, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self, timeout: float = 5.0) -> None:
        self.stop_event.set()
        for srv in (self.verify_server, self.sync_server):
            if srv is not None:
                srv.shutdown()
                srv.drain()
                srv.server_close()
        for t in self._threads:
            t.join(timeout)
        event("stop", version=self.handle.version)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # heartbeat

    def register_once(self) -> bool:
        d = self.config.directory
        try:
            with socket.create_connection((d.host, d.port), timeout=CONNECT_TIMEOUT) as s:
                s.sendall((P.encode_directory(P.Register(self.verify_server.port))[0] + "\n").encode())
                reply = P.read_line(s.makefile("rb"))
            return reply == "OK"
        except (OSError, ProtocolError) as exc:
            log.debug("directory %s unreachable: %s", d, exc)
            return False

    def _heartbeat_loop(self):
        while not self.stop_event.is_set():
            self.register_once()
            self.stop_event.wait(self.config.interval)

    # sync

    def _sync_loop(self):
        while not self.stop_event.is_set():
            try:
                self.check_local_publish()
                peers = list(self.config.peers)
                random.shuffle(peers)
                for peer in peers:
                    try:
                        if self.sync_from(peer):
                            break
                    except (OSError, ProtocolError, SyncAborted, DidbError) as exc:
                        event("sync_error", peer=str(peer), error=f"{type(exc).__name__}: {exc}")
            except Exception:
                log.exception("sync loop iteration failed")
            self.stop_event.wait(self.config.interval)

    def check_local_publish(self) -> bool:
        """Adopt a newer store that an operator made current under the node root."""
        directory = active_directory(self.config.store)
        snap = self.handle.active
        if directory is None or (snap is not None and Path(snap.directory) == directory):
            return False
        try:
            manifest, _ = read_manifest(directory)
            if snap is not None and manifest.didb_version <= snap.version:
                return False
            self.handle.swap_version(directory)
        except (DidbError, OSError) as exc:
            log.warning("local store %s not adopted: %s", directory, exc)
            return False
        event("swap", source="local", version=self.handle.version,
              bytes_received=self.bytes_received, chunks_fetched=self.chunks_fetched)
        return True

    def sync_from(self, peer: P.NodeDescriptor) -> bool:
        """One sync session with ``peer``; True if a new version was activated."""
        with socket.create_connection((peer.host, peer.port), timeout=CONNECT_TIMEOUT) as s:
            s.settimeout(IO_TIMEOUT)
            reader = _CountingReader(s.makefile("rb"))
            try:
                return self._session(peer, s, reader)
            finally:
                self.bytes_received += reader.count

    def _request(self, sock, reader, msg):
        sock.sendall(P.encode_sync(msg))
        reply = P.read_sync(reader)
        if reply is None:
            raise SyncAborted("peer closed connection")
        return reply

    def _session(self, peer, sock, reader) -> bool:
        hello = self._request(sock, reader, P.Hello())
        if not isinstance(hello, P.Hello) or hello.version != P.PROTOCOL_VERSION:
            raise SyncAborted(f"unexpected handshake {hello!r}")
        reply = self._request(sock, reader, P.ManifestRequest())
        if isinstance(reply, P.SyncError):
            event("sync_decision", peer=str(peer), action="peer_not_ready")
            return False
        if not isinstance(reply, P.ManifestData):
            raise SyncAborted(f"expected manifest, got {type(reply).__name__}")
        remote_bytes = reply.data
        remote = Manifest.parse(remote_bytes)
        local = self.handle.active
        local_version = local.version if local is not None else None
        if local is not None and remote.didb_version <= local.version:
            event("sync_decision", peer=str(peer), action="up_to_date",
                  local=local_version, remote=remote.didb_version)
            return False
        needed = diff_manifests(local.manifest if local is not None else None, remote)
        event("sync_decision", peer=str(peer), action="fetch", local=local_version,
              remote=remote.didb_version, chunks=needed)

        root = self.config.store
        rel = version_dirname(remote.didb_version)
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        staging = target.parent / f".{target.name}.staging-{uuid.uuid4().hex[:8]}"
        (staging / CHUNK_DIR).mkdir(parents=True)
        fetched = 0
        try:
            wanted = set(needed)
            failures = 0
            for d in remote.descriptors:
                path = staging / CHUNK_DIR / chunk_filename(d.index)
                if d.index not in wanted:
                    path.write_bytes(local.chunk_bytes(d.index))
                    continue
                while True:
                    msg = self._request(sock, reader, P.GetChunk(d.index))
                    if (isinstance(msg, P.ChunkData) and msg.index == d.index
                            and sha256_hex(msg.data) == d.checksum):
                        path.write_bytes(msg.data)
                        fetched += 1
                        break
                    failures += 1
                    event("chunk_rejected", peer=str(peer), index=d.index, failures=failures)
                    if isinstance(msg, P.SyncError) or failures > CHUNK_RETRY_BUDGET:
                        raise SyncAborted(f"chunk {d.index} unavailable from {peer}")
            (staging / MANIFEST_NAME).write_bytes(remote_bytes)
            if target.exists():
                shutil.rmtree(target)
            os.rename(staging, target)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        finally:
            self.chunks_fetched += fetched
        try:
            self.handle.swap_version(target)
        except StaleVersion:
            return False
        set_current(root, rel)
        event("swap", source=str(peer), version=remote.didb_version, fetched=fetched,
              bytes_received=self.bytes_received + reader.count,
              chunks_fetched=self.chunks_fetched)
        return True


def serve(config: NodeConfig, stop: threading.Event | None = None) -> None:
    """Run a node until ``stop`` is set (or forever)."""
    node = Node(config).start()
    try:
        (stop or threading.Event()).wait()
    finally:
        node.stop()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="didb-node", description="Run a private DIDB node.")
    ap.add_argument("--config", help="key = value config file; CLI flags override it")
    ap.add_argument("--store")
    ap.add_argument("--verify-port", type=int)
    ap.add_argument("--sync-port", type=int)
    ap.add_argument("--directory", help="host:port of the directory server")
    ap.add_argument("--peer", action="append", default=None, help="host:port of a peer sync port")
    ap.add_argument("--interval", type=float)
    ap.add_argument("--host")
    ap.add_argument("--log-file")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)

    settings = load_config_file(args.config) if args.config else {}
    if "peer" in settings:
        settings.setdefault("peers", settings.pop("peer"))
    for key in ("store", "verify_port", "sync_port", "directory", "interval", "host"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    if args.peer is not None:
        settings["peers"] = args.peer
    if isinstance(settings.get("peers"), str):
        settings["peers"] = [settings["peers"]]
    if "store" not in settings:
        ap.error("--store is required (flag or config)")

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        filename=args.log_file,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        config = NodeConfig(**settings)
    except (TypeError, ValueError, ProtocolError) as exc:
        ap.error(str(exc))
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    serve(config, stop)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
