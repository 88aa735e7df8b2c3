"""Compare the numba and numpy record-matrix kernels.

    python benchmarks/bench_lookup.py --records 1000000 --probes 100000

The numba column is skipped when numba is missing or DIDB_DISABLE_NUMBA is set.
"""

import argparse
import json
import time

import numpy as np

from didb import _kernels as K

HEX = np.frombuffer(b"0123456789abcdef", dtype=np.uint8)


def random_records(n: int, rng: np.random.Generator) -> np.ndarray:
    years = rng.integers(1900, 2021, n)
    months = rng.integers(1, 13, n)
    prefix = np.char.encode(np.char.add(np.char.zfill(years.astype(str), 4),
                                        np.char.zfill(months.astype(str), 2)), "ascii")
    mat = np.empty((n, 46), dtype=np.uint8)
    mat[:, :6] = np.frombuffer(prefix.astype("S6").tobytes(), dtype=np.uint8).reshape(n, 6)
    mat[:, 6:] = HEX[rng.integers(0, 16, (n, 40))]
    keys = np.unique(mat.view("S46").ravel())
    return np.frombuffer(keys.tobytes(), dtype=np.uint8).reshape(-1, 46)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=1_000_000)
    ap.add_argument("--probes", type=int, default=100_000)
    ap.add_argument("--single", type=int, default=2_000, help="single-key lookups per timing")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    mat = random_records(args.records, rng)
    half = args.probes // 2
    probes = np.concatenate([mat[rng.integers(0, len(mat), half)],
                             random_records(args.probes - half, rng)])
    singles = [probes[i] for i in range(min(args.single, len(probes)))]

    cases = {
        "contains x%d" % len(singles): ("contains", lambda f: [f(mat, k) for k in singles]),
        "contains_many %d" % len(probes): ("contains_many", lambda f: f(mat, probes)),
        "strictly_ascending": ("strictly_ascending", lambda f: f(mat)),
        "well_formed": ("well_formed", lambda f: f(mat)),
    }
    results = []
    for label, (name, call) in cases.items():
        row = {"kernel": label, "numpy_s": best_of(lambda: call(getattr(K, "np_" + name)), args.repeat)}
        if K.HAVE_NUMBA:
            nb = getattr(K, "nb_" + name)
            call(nb)  # compile outside the timing
            row["numba_s"] = best_of(lambda: call(nb), args.repeat)
            row["speedup"] = row["numpy_s"] / row["numba_s"]
            a, b = call(getattr(K, "np_" + name)), call(nb)
            row["agree"] = bool(np.array_equal(np.asarray(a), np.asarray(b)))
        results.append(row)

    if args.json:
        print(json.dumps({"records": len(mat), "backend": K.BACKEND, "results": results}, indent=2))
        return 0
    print(f"{len(mat)} records, {len(probes)} probes, best of {args.repeat}")
    print(f"{'kernel':<24}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}  agree")
    for r in results:
        nb = f"{r['numba_s'] * 1e3:12.2f}{r['speedup']:9.1f}  {r['agree']}" if "numba_s" in r else f"{'-':>12}{'-':>9}"
        print(f"{r['kernel']:<24}{r['numpy_s'] * 1e3:12.2f}{nb}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
