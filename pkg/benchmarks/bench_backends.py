"""Compare the compiled and interpreted propagation backends.

The front propagation engine is the only part of the package with a
compiled fast path: every other stage is vectorized numpy or FFT work
that runs identically regardless of backend. This script times tree
extraction on cubic grids under both settings of ``VESSELTRACE_BACKEND``
and prints a side-by-side table. Each measurement is taken in a fresh
subprocess because the backend is chosen once at import time.

Run from the repository root::

    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --sizes 16,24 --repeats 5

The two backends produce bitwise-identical outputs (see the parity test
in tests/test_marching.py); only the wall time differs.
"""

import argparse
import json
import os
import subprocess
import sys
import time

_WORKER_FLAG = "--worker"


def _metric(size, anisotropic):
    import numpy as np

    from vesseltrace.volume import ScalarVolume, TensorFieldLE

    dims = (size, size, size)
    cvm = ScalarVolume(data=np.ones(dims))
    field = np.zeros(dims + (6,))
    if anisotropic:
        # constant trace-free log-tensor, elongated along x
        field[..., 0] = 0.8
        field[..., 1] = -0.4
        field[..., 2] = -0.4
    return cvm, TensorFieldLE(data=field)


def _seeds(size):
    import numpy as np

    from vesseltrace.filtering import SeedSet

    mid = size // 2
    voxels = np.array([[2, mid, mid], [size - 3, mid, mid], [mid, mid, 2]])
    return SeedSet(voxels=voxels, orientations=np.tile(np.eye(3), (3, 1, 1)))


def _run_worker(sizes, repeats):
    from vesseltrace._backend import backend_name
    from vesseltrace.marching import extract_tree

    # warm pass triggers compilation so timed runs measure steady state
    cvm, tf = _metric(12, anisotropic=False)
    t0 = time.perf_counter()
    extract_tree(cvm, tf, _seeds(12))
    warmup = time.perf_counter() - t0

    results = []
    for task, anisotropic in (("march", False), ("march-aniso", True)):
        for size in sizes:
            cvm, tf = _metric(size, anisotropic)
            seeds = _seeds(size)
            best = min(
                _timed(extract_tree, cvm, tf, seeds) for _ in range(repeats)
            )
            results.append({"task": task, "size": size, "seconds": best})
    print(json.dumps(
        {"backend": backend_name(), "warmup": warmup, "results": results}
    ))


def _timed(func, *args):
    t0 = time.perf_counter()
    func(*args)
    return time.perf_counter() - t0


def _spawn(backend, sizes, repeats):
    env = dict(os.environ, VESSELTRACE_BACKEND=backend)
    cmd = [
        sys.executable, os.path.abspath(__file__), _WORKER_FLAG,
        "--sizes", ",".join(str(s) for s in sizes),
        "--repeats", str(repeats),
    ]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            "%s worker failed:\n%s" % (backend, proc.stderr.strip())
        )
    payload = json.loads(proc.stdout.splitlines()[-1])
    if payload["backend"] != ("numba" if backend == "numba" else "python"):
        raise RuntimeError(
            "requested %s backend but worker reports %s, is numba installed?"
            % (backend, payload["backend"])
        )
    return payload


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Benchmark the propagation engine under both backends."
    )
    parser.add_argument(_WORKER_FLAG, action="store_true",
                        help=argparse.SUPPRESS)
    parser.add_argument("--sizes", default="16,24,32",
                        help="comma-separated cubic grid edges")
    parser.add_argument("--repeats", type=int, default=3,
                        help="timed runs per case, best is reported")
    args = parser.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if args.worker:
        _run_worker(sizes, args.repeats)
        return 0

    payloads = {
        backend: _spawn(backend, sizes, args.repeats)
        for backend in ("numba", "python")
    }
    print("propagation engine, best of %d runs per case" % args.repeats)
    print("numba first-call warmup (compile + cache): %.2f s"
          % payloads["numba"]["warmup"])
    print()
    header = "%-12s %6s %12s %12s %9s" % (
        "task", "grid", "numba [s]", "python [s]", "speedup")
    print(header)
    print("-" * len(header))
    fast = {(r["task"], r["size"]): r["seconds"]
            for r in payloads["numba"]["results"]}
    for r in payloads["python"]["results"]:
        key = (r["task"], r["size"])
        print("%-12s %4d^3 %12.4f %12.4f %8.1fx" % (
            r["task"], r["size"], fast[key], r["seconds"],
            r["seconds"] / fast[key]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
