"""Wall-clock comparison of the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import timeit

import numpy as np

from sparsevox import kernels


def cases(rng):
    H, W, C = 32, 64, 16
    fmap = rng.normal(size=(H, W, C))
    N = 2000
    u = rng.uniform(-2, W + 1, N)
    v = rng.uniform(-2, H + 1, N)
    n, Hh, S = 300, 4, 4
    uu = rng.uniform(0, W - 1, n)
    vv = rng.uniform(0, H - 1, n)
    off = rng.normal(scale=3, size=(n, Hh, S, 2))
    att = rng.dirichlet(np.ones(S), size=(n, Hh))
    gG = rng.normal(size=(n, Hh, C))
    X = rng.normal(size=(1000, 64))
    Wt = rng.normal(size=(64, 64))
    b = rng.normal(size=64)
    occ = rng.random((16, 16, 4)) < 0.07
    dirs = rng.normal(size=(2048, 3))
    dirs[:, 1] = np.abs(dirs[:, 1]) + 0.5
    o = np.array([1.6, -1.0, 2.4])
    g = rng.normal(size=(N, C))
    return {
        "bilinear_sample": lambda k: k.bilinear_sample(fmap, u, v),
        "bilinear_backward": lambda k: k.bilinear_backward(fmap, u, v, g),
        "deform_aggregate": lambda k: k.deform_aggregate(fmap, uu, vv, off, att),
        "deform_aggregate_backward": lambda k: k.deform_aggregate_backward(fmap, uu, vv, off, att, gG),
        "linear_rows": lambda k: k.linear_rows(X, Wt, b),
        "raycast": lambda k: k.raycast(occ, np.zeros(3), 0.2, o, dirs),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled backend unavailable; build with `pip install --no-build-isolation -e .`")
    rows = {}
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for label, mod in (("python", kernels.python), ("compiled", kernels.compiled)):
            if mod is None:
                continue
            fn(mod)
            row[label + "_ms"] = 1e3 * min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        if "compiled_ms" in row:
            row["speedup"] = row["python_ms"] / row["compiled_ms"]
        rows[name] = row
        print(f"{name:28s} " + "  ".join(f"{k}={v:9.3f}" for k, v in row.items()))
    print(json.dumps(rows))


if __name__ == "__main__":
    main()
