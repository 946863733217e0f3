"""Compare the compiled and pure-Python kernel backends.

Two layers of measurement:

1. micro: each block-structured kernel on a workload shaped like training
   (hundreds of small neighborhood blocks per batch);
2. end-to-end: one batched policy evaluation plus its parameter gradient,
   which exercises the whole tape with whichever backend is selected.

The micro section always times both backends in-process.  The end-to-end
section honors PHSWARM_BACKEND, which is resolved at import time — run it
twice (once with PHSWARM_BACKEND=python, once =cython) to compare, e.g.:

    python3 benchmarks/bench_kernels.py
    PHSWARM_BACKEND=python python3 benchmarks/bench_kernels.py --end-to-end-only
"""

import argparse
import time

import numpy as np

from phswarm.backend import py_kernels

try:
    from phswarm.backend import cy_kernels
except ImportError:
    cy_kernels = None


def _workload(rng, blocks=768, mean_width=3, r=8, p=8, q=16):
    """Column-blocked matrices shaped like one batch of neighborhood views."""
    widths = rng.integers(1, 2 * mean_width, size=blocks)
    offsets = np.zeros(blocks + 1, dtype=np.int64)
    np.cumsum(widths, out=offsets[1:])
    cols = int(offsets[-1])
    return {
        "offsets": offsets,
        "a": rng.normal(size=(r, cols)),
        "b": rng.normal(size=(r, cols)),
        "s": rng.normal(size=(blocks * p, q)),
        "x_q": rng.normal(size=(q, cols)),
        "x_p": rng.normal(size=(p, cols)),
        "y": rng.normal(size=(r, blocks)),
        "idx": rng.integers(0, cols, size=cols),
        "total": cols,
    }


def _cases(w):
    return [
        ("bmm_cc_rb", lambda k: k.bmm_cc_rb(w["a"], w["b"], w["offsets"])),
        ("bmm_rc_cb", lambda k: k.bmm_rc_cb(w["s"], w["x_q"], w["offsets"])),
        ("bmm_rtc_cb", lambda k: k.bmm_rtc_cb(w["s"], w["x_p"], w["offsets"])),
        ("block_colsum", lambda k: k.block_colsum(w["a"], w["offsets"])),
        ("block_repeat", lambda k: k.block_repeat(w["y"], w["offsets"])),
        ("gather_cols", lambda k: k.gather_cols(w["a"], w["idx"])),
        ("scatter_add_cols", lambda k: k.scatter_add_cols(w["a"], w["idx"], w["total"])),
    ]


def _time(fn, repeat):
    fn()  # warm
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def run_micro(repeat):
    rng = np.random.default_rng(0)
    w = _workload(rng)
    backends = [("python", py_kernels)]
    if cy_kernels is not None:
        backends.append(("cython", cy_kernels))
    print(f"{'kernel':<18}" + "".join(f"{name:>12}" for name, _ in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for case_name, call in _cases(w):
        times = [_time(lambda k=kern: call(k), repeat) for _, kern in backends]
        row = f"{case_name:<18}" + "".join(f"{t * 1e6:>10.1f}us" for t in times)
        if len(times) == 2 and times[1] > 0:
            row += f"{times[0] / times[1]:>11.2f}x"
        print(row)
        if len(backends) == 2:
            ref = call(py_kernels)
            got = call(cy_kernels)
            np.testing.assert_allclose(got, ref, atol=1e-12)
    if len(backends) == 2:
        print("(cython outputs matched python outputs to 1e-12)")


def run_end_to_end(repeat):
    from phswarm import backend
    from phswarm import autodiff as ad
    from phswarm.dynamics import compose, navigation_robot
    from phswarm.policy import init_policy, policy_step

    n, batch = 3, 64
    model = compose([navigation_robot(2) for _ in range(n)])
    params = init_policy(0, n_x=6, n_u=2)
    rng = np.random.default_rng(1)
    states = rng.normal(size=(batch, n, 6))
    adj = np.tile(1.0 - np.eye(n), (batch, 1, 1))

    def once():
        step = policy_step(params, model, states, adj, rng=rng, create_graph=True)
        ad.grad(ad.mean_all(step.log_pi_env), list(step.param_leaves.values()))

    t = _time(once, repeat)
    print(f"policy forward+grad (batch {batch}, n={n}), backend={backend.name}: "
          f"{t * 1e3:.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200,
                        help="iterations per micro measurement")
    parser.add_argument("--end-to-end-repeat", type=int, default=20)
    parser.add_argument("--end-to-end-only", action="store_true")
    args = parser.parse_args()
    if not args.end_to_end_only:
        if cy_kernels is None:
            print("compiled backend unavailable; timing python only")
        run_micro(args.repeat)
        print()
    run_end_to_end(args.end_to_end_repeat)


if __name__ == "__main__":
    main()
