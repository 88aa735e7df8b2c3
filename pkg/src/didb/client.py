"""Outside verifier: hash the document fields locally and ask private nodes.

Only the 46-character parameter ever leaves the machine.  Node addresses come
from an explicit list or the directory's ``LIST`` (cached for a minute); nodes
are tried in random order until one gives a definite answer.
"""

from __future__ import annotations

import argparse
import json
import random
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

from . import protocol as P
from .core import IdentityFields, make_record, parse_record
from .errors import AllNodesFailed, DidbError, EmptyNodeList, ProtocolError

DEFAULT_TIMEOUT = 2.0
LIST_CACHE_TTL = 60.0

_list_cache: dict[tuple[str, int], tuple[float, list[P.NodeDescriptor]]] = {}
_list_lock = threading.Lock()


def build_parameter(fields: IdentityFields) -> str:
    return make_record(fields).encode()


@dataclass
class Attempt:
    node: str
    outcome: str  # FOUND, NOT_FOUND, ERR <code>, or the failure reason
    elapsed_ms: float


@dataclass
class VerifyResult:
    status: str
    didb_version: int
    node: str
    attempts: list = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.status == P.FOUND

    def to_dict(self) -> dict:
        return asdict(self)


def fetch_node_list(directory: P.NodeDescriptor, timeout: float = DEFAULT_TIMEOUT) -> list[P.NodeDescriptor]:
    with socket.create_connection((directory.host, directory.port), timeout=timeout) as s:
        s.settimeout(timeout)
        s.sendall(b"LIST\n")
        rfile = s.makefile("rb")
        lines = []
        while True:
            line = P.read_line(rfile)
            if line is None:
                raise ProtocolError("directory closed before END")
            lines.append(line)
            if line == "END" or line.startswith("ERR "):
                break
    reply = P.decode_directory_response(lines)
    if not isinstance(reply, P.NodeList):
        raise ProtocolError(f"unexpected directory reply {reply!r}")
    return list(reply.nodes)


def cached_node_list(directory: P.NodeDescriptor, timeout: float = DEFAULT_TIMEOUT,
                     ttl: float = LIST_CACHE_TTL, refresh: bool = False) -> list[P.NodeDescriptor]:
    key = (directory.host, directory.port)
    now = time.monotonic()
    with _list_lock:
        hit = _list_cache.get(key)
    if hit and not refresh and now - hit[0] < ttl:
        return list(hit[1])
    nodes = fetch_node_list(directory, timeout)
    with _list_lock:
        _list_cache[key] = (now, nodes)
    return list(nodes)


def clear_cache() -> None:
    with _list_lock:
        _list_cache.clear()


def query_node(node: P.NodeDescriptor, parameter: str, timeout: float = DEFAULT_TIMEOUT) -> P.VerifyResponse:
    line = P.encode_verification(P.VerifyRequest(parameter)) + "\n"
    with socket.create_connection((node.host, node.port), timeout=timeout) as s:
        s.settimeout(timeout)
        s.sendall(line.encode("ascii"))
        reply = P.read_line(s.makefile("rb"))
    if reply is None:
        raise ProtocolError("node closed connection without answering")
    return P.decode_verification_response(reply)


def verify_parameter(parameter: str, directory=None, nodes=None, retry_budget: int | None = None,
                     timeout: float = DEFAULT_TIMEOUT, rng: random.Random | None = None) -> VerifyResult:
    parameter = parse_record(parameter).encode()
    if nodes is None and directory is None:
        raise ValueError("need a directory address or a node list")
    if isinstance(directory, str):
        directory = P.NodeDescriptor.parse(directory)
    if nodes is None:
        nodes = cached_node_list(directory, timeout)
    nodes = [P.NodeDescriptor.parse(n) if isinstance(n, str) else n for n in nodes]
    if not nodes:
        raise EmptyNodeList("no nodes available")
    order = list(nodes)
    (rng or random).shuffle(order)
    budget = len(order) if retry_budget is None else retry_budget
    attempts: list[Attempt] = []
    for node in order[:budget]:
        t0 = time.perf_counter()
        try:
            resp = query_node(node, parameter, timeout)
        except (OSError, ProtocolError) as exc:
            outcome = f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
            attempts.append(Attempt(str(node), outcome, (time.perf_counter() - t0) * 1e3))
            continue
        elapsed = (time.perf_counter() - t0) * 1e3
        if resp.status == P.ERR:
            attempts.append(Attempt(str(node), f"ERR {resp.error_code}", elapsed))
            continue
        attempts.append(Attempt(str(node), resp.status, elapsed))
        return VerifyResult(resp.status, resp.didb_version, str(node), attempts)
    raise AllNodesFailed(f"{len(attempts)} attempt(s) failed", attempts)


def verify(fields: IdentityFields, directory=None, nodes=None, retry_budget: int | None = None,
           timeout: float = DEFAULT_TIMEOUT, rng: random.Random | None = None) -> VerifyResult:
    # hashing first: bad input fails before any network activity
    return verify_parameter(build_parameter(fields), directory, nodes, retry_budget, timeout, rng)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="didb-verify", description="Verify an identity document against private nodes.")
    ap.add_argument("--directory", help="host:port of the directory server")
    ap.add_argument("--node", action="append", help="host:port of a node (skips the directory)")
    ap.add_argument("--param", help="pre-hashed 46-character parameter")
    ap.add_argument("--serial")
    ap.add_argument("--name")
    ap.add_argument("--dob", help="YYYY-MM-DD")
    ap.add_argument("--blood", default="")
    ap.add_argument("--place", default="")
    ap.add_argument("--issue", help="YYYY-MM-DD")
    ap.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    ap.add_argument("--retries", type=int, help="attempt budget (default: list length)")
    ap.add_argument("--json", action="store_true", help="print a JSON result with the attempts log")
    args = ap.parse_args(argv)

    def fail(msg, attempts=()):
        if args.json:
            print(json.dumps({"status": "ERROR", "error": msg, "attempts": [asdict(a) for a in attempts]}))
        else:
            print(f"error: {msg}", file=sys.stderr)
        return 2

    if not args.directory and not args.node:
        return fail("need --directory or --node")
    try:
        if args.param:
            parameter = parse_record(args.param).encode()
        else:
            missing = [f for f in ("serial", "name", "dob", "issue") if getattr(args, f) is None]
            if missing:
                return fail("missing fields: " + ", ".join("--" + m for m in missing))
            fields = IdentityFields.from_strings(args.serial, args.name, args.dob,
                                                 args.blood, args.place, args.issue)
            parameter = build_parameter(fields)
        result = verify_parameter(parameter, args.directory, args.node, args.retries, args.timeout)
    except AllNodesFailed as exc:
        return fail(str(exc), exc.attempts)
    except (DidbError, ValueError, OSError) as exc:
        return fail(f"{type(exc).__name__}: {exc}")
    if args.json:
        print(json.dumps({"parameter": parameter, **result.to_dict()}))
    else:
        print(f"{result.status} (didb v{result.didb_version}, node {result.node}, "
              f"{len(result.attempts)} attempt(s))")
    return 0 if result.found else 1


if __name__ == "__main__":
    raise SystemExit(main())
