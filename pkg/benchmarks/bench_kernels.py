"""Time the compiled and pure-numpy kernel backends on flow-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Also times one forward+backward NLL step of the desk model under whichever
backend is active (set FLOWNULL_PURE_PYTHON=1 to force the fallback).
"""

import argparse
import json
import timeit

import numpy as np

from flownull import kernels

CASES = {
    # name: (builder, call)
    "fft_rows 2x32x32": (
        lambda rng: (rng.standard_normal((64, 32)) + 1j * rng.standard_normal((64, 32))),
        lambda k, a: k.fft_rows(a.copy(), False),
    ),
    "fft_rows 8x256x256": (
        lambda rng: (rng.standard_normal((2048, 256)) + 1j * rng.standard_normal((2048, 256))),
        lambda k, a: k.fft_rows(a.copy(), False),
    ),
    "im2col 8x32x16x16 k3": (
        lambda rng: rng.standard_normal((8, 32, 16, 16)).astype(np.float32),
        lambda k, x: k.im2col(x, 3, 3, 1),
    ),
    "col2im 8x32x16x16 k3": (
        lambda rng: rng.standard_normal((32 * 9, 8 * 16 * 16)).astype(np.float32),
        lambda k, c: k.col2im(c, 8, 32, 16, 16, 3, 3, 1),
    ),
}


def bench(repeat):
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    rows = []
    for name, (build, call) in CASES.items():
        arg = build(rng)
        times = {}
        for bname, mod in sorted(backends.items()):
            call(mod, arg)  # warm-up
            t = timeit.repeat(lambda: call(mod, arg), number=1, repeat=repeat)
            times[bname] = min(t)
        row = {"case": name, **{f"{b}_ms": 1e3 * v for b, v in times.items()}}
        if "cython" in times:
            row["speedup"] = times["python"] / times["cython"]
        rows.append(row)
    return rows


def bench_step(repeat):
    from flownull import mri
    from flownull.config import RunConfig
    from flownull.core import Tape
    from flownull.data import Dataset
    from flownull.flow import ConditionalFlow
    from flownull.train import nll_loss

    run = RunConfig()
    d = run.dataset
    data = Dataset.simulate(8, d.height, d.width, d.coils, mri.make_gro_mask(d.width, d.R, d.acs))
    model = ConditionalFlow(run.model_config())
    u, y = data.targets(True), data.channels("y")
    model.initialize(u, y)
    params = model.parameters()

    def step():
        with Tape() as tape:
            loss, _ = nll_loss(model, u, y)
        tape.backward(loss, params)

    step()
    return 1e3 * min(timeit.repeat(step, number=1, repeat=max(3, repeat // 5)))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json")
    p.add_argument("--skip-step", action="store_true")
    args = p.parse_args(argv)
    rows = bench(args.repeat)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'case':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['case']:<24}{r['python_ms']:>12.3f}{r.get('cython_ms', float('nan')):>12.3f}"
              f"{r.get('speedup', float('nan')):>10.2f}")
    out = {"backend": kernels.BACKEND, "kernels": rows}
    if not args.skip_step:
        out["desk_nll_step_ms"] = bench_step(args.repeat)
        print(f"desk NLL step (batch 8, {kernels.BACKEND}): {out['desk_nll_step_ms']:.1f} ms")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(out, f, indent=2)
    return out


if __name__ == "__main__":
    main()
