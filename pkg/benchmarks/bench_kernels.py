"""Compare the compiled and numpy dense-layer kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--batch B ...]

Times one forward and one backward pass of a single dense layer and of a full
MLP training step (forward + backward) for each available backend, and checks
that both backends agree numerically.
"""
import argparse
import json
import timeit

import numpy as np

from sfolab.numcore import MlpSpec, RngStream, backend, init_params, mlp_backward, mlp_forward


def time_call(fn, repeats):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeats)) / number


def bench_layer(name, batch, width, repeats):
    fwd, bwd = backend.get_kernels(name)
    r = RngStream(0)
    x, w, b, up = r.normal((batch, width)), r.normal((width, width)), r.normal(width), r.normal((batch, width))
    _, dact = fwd(x, w, b, 1)
    return {"forward_us": 1e6 * time_call(lambda: fwd(x, w, b, 1), repeats),
            "backward_us": 1e6 * time_call(lambda: bwd(x, w, dact, up), repeats)}


def bench_mlp(name, batch, repeats):
    fwd, bwd = backend.get_kernels(name)
    saved = backend.dense_forward, backend.dense_backward
    backend.dense_forward, backend.dense_backward = fwd, bwd
    try:
        spec = MlpSpec(41, (128, 128, 128), 16)
        p = init_params(spec, RngStream(1))
        x, up = RngStream(2).normal((batch, 41)), RngStream(3).normal((batch, 16))
        t = time_call(lambda: mlp_backward(p, spec, x, up), repeats)
        out = mlp_forward(p, spec, x)
    finally:
        backend.dense_forward, backend.dense_backward = saved
    return 1e6 * t, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, nargs="+", default=[4, 64, 256])
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)

    names = ["numpy"] + (["cython"] if backend.compiled_available() else [])
    results = []
    for batch in args.batch:
        row = {"batch": batch}
        outs = {}
        for name in names:
            layer = bench_layer(name, batch, args.width, args.repeats)
            step_us, outs[name] = bench_mlp(name, batch, args.repeats)
            row[name] = dict(layer, mlp_step_us=step_us)
        if len(outs) == 2:
            row["max_abs_diff"] = float(np.max(np.abs(outs["numpy"] - outs["cython"])))
            row["speedup_mlp_step"] = row["numpy"]["mlp_step_us"] / row["cython"]["mlp_step_us"]
        results.append(row)

    if args.json:
        print(json.dumps({"default_backend": backend.NAME, "results": results}, indent=2))
        return
    print(f"default backend: {backend.NAME}; layer width {args.width}; MLP 41-128-128-128-16 (tanh)")
    head = f"{'batch':>6} {'backend':>8} {'fwd us':>10} {'bwd us':>10} {'mlp step us':>12}"
    print(head)
    for row in results:
        for name in names:
            r = row[name]
            print(f"{row['batch']:>6} {name:>8} {r['forward_us']:>10.1f} {r['backward_us']:>10.1f} "
                  f"{r['mlp_step_us']:>12.1f}")
        if "speedup_mlp_step" in row:
            print(f"{'':>6} speedup (numpy / cython) {row['speedup_mlp_step']:.2f}x, "
                  f"max |diff| {row['max_abs_diff']:.1e}")


if __name__ == "__main__":
    main()
