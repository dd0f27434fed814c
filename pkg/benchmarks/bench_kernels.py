"""Time the kNN and PAV kernels under the numba and pure-numpy backends.

The backend is fixed at import time, so each one runs in its own
subprocess with ``DACAL_DISABLE_NUMBA`` set accordingly. Both runs also
report a digest of the kNN output, which must agree bitwise.

    python3 benchmarks/bench_kernels.py --ref 10000 --queries 5000 --dim 32
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from dacal import backend
from dacal._kernels import kth_distance_kernel, pav
from dacal.core import l2_normalize_rows

n_ref, n_q, dim, k, n_pav, reps = map(int, sys.argv[1:7])
rng = np.random.default_rng(0)
ref = l2_normalize_rows(rng.standard_normal((n_ref, dim)))
qry = l2_normalize_rows(rng.standard_normal((n_q, dim)))
y = rng.standard_normal(n_pav).cumsum() * 0.01 + rng.standard_normal(n_pav)
w = np.ones(n_pav)

kth_distance_kernel(ref[:50], qry[:5], 3)  # compile / warm up
pav(y[:10], w[:10])

def best(fn):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out

t_knn, d = best(lambda: kth_distance_kernel(ref, qry, k))
t_pav, _ = best(lambda: pav(y, w))
print(json.dumps({"backend": backend(), "knn_s": t_knn, "pav_s": t_pav,
                  "knn_digest": hashlib.sha256(d.tobytes()).hexdigest()[:16]}))
"""


def run(disable: bool, args) -> dict:
    env = dict(os.environ, DACAL_DISABLE_NUMBA="1" if disable else "0")
    argv = [str(v) for v in (args.ref, args.queries, args.dim, args.k, args.pav, args.reps)]
    out = subprocess.run([sys.executable, "-c", WORKER, *argv], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ref", type=int, default=10000)
    p.add_argument("--queries", type=int, default=5000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--pav", type=int, default=20000)
    p.add_argument("--reps", type=int, default=3)
    args = p.parse_args()

    fast, slow = run(False, args), run(True, args)
    print(f"{'backend':<8} {'knn [s]':>10} {'pav [s]':>10}  digest")
    for r in (fast, slow):
        print(f"{r['backend']:<8} {r['knn_s']:>10.3f} {r['pav_s']:>10.4f}  {r['knn_digest']}")
    if fast["backend"] == "numba":
        print(f"speedup  {slow['knn_s'] / fast['knn_s']:>10.1f}x {slow['pav_s'] / fast['pav_s']:>10.1f}x")
    print("outputs identical" if fast["knn_digest"] == slow["knn_digest"] else "OUTPUTS DIFFER")


if __name__ == "__main__":
    main()
