"""Trusted directory: relays live node addresses to clients.

Nodes send ``REGISTER <port>`` as a heartbeat; the host is taken from the
connection's source address.  Entries not refreshed within the TTL are
dropped from ``LIST``.
"""

from __future__ import annotations

import argparse
import logging
import signal
import socketserver
import threading
import time
from collections import OrderedDict

from . import protocol as P
from .errors import ProtocolError

log = logging.getLogger(__name__)

DEFAULT_TTL = 30.0  # 3 x the default node poll interval


class Registry:
    """Thread-safe map of (host, port) to last heartbeat time."""

    def __init__(self, ttl: float = DEFAULT_TTL, clock=time.monotonic):
        self.ttl = ttl
        self._clock = clock
        self._entries: OrderedDict[tuple[str, int], float] = OrderedDict()
        self._lock = threading.Lock()

    def _expire(self, now: float) -> None:
        dead = [k for k, seen in self._entries.items() if now - seen > self.ttl]
        for k in dead:
            del self._entries[k]

    def register(self, host: str, port: int) -> None:
        with self._lock:
            now = self._clock()
            self._expire(now)
            # refresh keeps the original registration position
            self._entries[(host, port)] = now

    def live(self) -> list[P.NodeDescriptor]:
        with self._lock:
            self._expire(self._clock())
            return [P.NodeDescriptor(h, p) for h, p in self._entries]

    def __len__(self):
        with self._lock:
            return len(self._entries)


class _Handler(socketserver.StreamRequestHandler):
    timeout = 30

    def handle(self):
        registry: Registry = self.server.registry
        host = self.client_address[0]
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
                req = P.decode_directory_request(line)
            except ProtocolError:
                reply = P.DirError("BAD_REQUEST")
            else:
                if isinstance(req, P.Register):
                    registry.register(host, req.port)
                    log.debug("register %s:%d", host, req.port)
                    reply = P.Ok()
                elif isinstance(req, P.ListRequest):
                    reply = P.NodeList(tuple(registry.live()))
                else:
                    reply = P.Pong()
            try:
                self.wfile.write("".join(x + "\n" for x in P.encode_directory(reply)).encode())
            except OSError:
                return


class DirectoryServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 256

    def __init__(self, address, ttl: float = DEFAULT_TTL):
        self.registry = Registry(ttl)
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_directory(port: int, ttl: float = DEFAULT_TTL, host: str = "127.0.0.1",
                    stop: threading.Event | None = None) -> None:
    server = DirectoryServer((host, port), ttl)
    log.info("directory listening on %s:%d ttl=%.1fs", host, server.port, ttl)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    stop = stop or threading.Event()
    try:
        stop.wait()
    finally:
        server.shutdown()
        server.server_close()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="didb-directory", description="Run the trusted node directory.")
    ap.add_argument("--port", type=int, required=True)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--ttl", type=float, default=DEFAULT_TTL)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    serve_directory(args.port, args.ttl, args.host, stop)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
