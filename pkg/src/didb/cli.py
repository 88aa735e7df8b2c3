"""``didb`` command: build, diff, generate, validate and publish stores."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DidbError


def _cmd_build(args) -> dict:
    from .builder import build, rebuild_incremental

    if args.old:
        manifest, changed, report = rebuild_incremental(args.old, args.cidb, args.version, args.out)
        out = report.to_dict()
        out["changed_chunks"] = changed
    else:
        manifest, report = build(args.cidb, args.version, args.out)
        out = report.to_dict()
    out["total_records"] = manifest.total_records
    return out


def _cmd_diff(args) -> dict:
    from .store import diff_manifests, read_manifest

    old, _ = read_manifest(args.old)
    new, _ = read_manifest(args.new)
    changed = diff_manifests(old, new)
    return {"old_version": old.didb_version, "new_version": new.didb_version,
            "changed_chunks": changed}


def _cmd_gen(args) -> dict:
    from .builder import generate_synthetic_cidb

    path = generate_synthetic_cidb(args.count, args.seed, args.out)
    return {"file": str(path), "rows": args.count, "seed": args.seed}


def _cmd_validate(args) -> dict:
    from .store import read_manifest, validate_store

    corrupt = validate_store(args.dir)
    manifest, _ = read_manifest(args.dir)
    return {"version": manifest.didb_version, "chunks": manifest.chunk_count,
            "corrupt_chunks": corrupt, "ok": not corrupt}


def _cmd_publish(args) -> dict:
    from .store import publish

    target = publish(args.store, args.node_root)
    return {"active": str(target)}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="didb", description="Build and inspect DIDB stores.")
    ap.add_argument("--report", help="write a JSON report to this file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("build", help="build a store from a CIDB CSV export")
    p.add_argument("--cidb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--version", type=int, required=True)
    p.add_argument("--old", help="previous store; also report changed chunks")
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("diff", help="list chunk indices that differ between two stores")
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.set_defaults(func=_cmd_diff)

    p = sub.add_parser("gen", help="write a synthetic CIDB CSV")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("validate", help="check chunk checksums and ordering")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("publish", help="install a built store into a node root and make it current")
    p.add_argument("store")
    p.add_argument("--node-root", required=True)
    p.set_defaults(func=_cmd_publish)

    # --report is accepted after the subcommand as well
    for sp in sub.choices.values():
        sp.add_argument("--report", dest="report_sub", help=argparse.SUPPRESS)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    report_path = args.report or args.report_sub
    try:
        result = {"ok": True, "command": args.cmd, **args.func(args)}
        code = 0
        if args.cmd == "validate" and not result["ok"]:
            code = 1
    except (DidbError, OSError, ValueError) as exc:
        result = {"ok": False, "command": args.cmd, "error": type(exc).__name__, "message": str(exc)}
        code = 1
        print(f"didb {args.cmd}: {type(exc).__name__}: {exc}", file=sys.stderr)
    if report_path:
        Path(report_path).write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
