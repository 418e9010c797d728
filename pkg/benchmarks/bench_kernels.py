"""Benchmark the compiled kernels against the pure-numpy reference.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from safegrid._kernels import _ref

try:
    from safegrid._kernels import _fast
except ImportError:
    _fast = None


def timeit(fn, repeats=200):
    fn()  # warm up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e6)  # microseconds


def main():
    rng = np.random.default_rng(0)
    cal = np.sort(rng.standard_normal(199))
    tests = rng.standard_normal(10_000)
    p_sorted = np.sort(rng.uniform(size=293))
    panel = rng.uniform(size=(40, 293))
    nulls = np.ones((40, 293), dtype=np.uint8)
    c_m = float(np.sum(1.0 / np.arange(1, 294)))

    cases = [
        ("conformal_pvalues (n'=199, 10k tests)",
         lambda impl: impl.conformal_pvalues(cal, tests)),
        ("step_up_kstar (m=293, BY)",
         lambda impl: impl.step_up_kstar(p_sorted, 0.05, c_m)),
        ("panel_reject_counts (40x293, BY)",
         lambda impl: impl.panel_reject_counts(panel, nulls, 0.05, c_m)),
    ]

    backends = [("python", _ref)]
    if _fast is not None:
        backends.append(("compiled", _fast))
    else:
        print("compiled extension not built; showing the reference only\n")

    header = f"{'kernel':45s}" + "".join(f"{name:>14s}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for label, call in cases:
        row = f"{label:45s}"
        medians = []
        for _, impl in backends:
            us = timeit(lambda impl=impl: call(impl))
            medians.append(us)
            row += f"{us:12.1f}us"
        if len(medians) == 2:
            row += f"{medians[0] / medians[1]:9.2f}x"
        print(row)

    # the two backends must agree bit for bit
    if _fast is not None:
        assert np.array_equal(_fast.conformal_pvalues(cal, tests),
                              _ref.conformal_pvalues(cal, tests))
        assert (_fast.step_up_kstar(p_sorted, 0.05, c_m)
                == _ref.step_up_kstar(p_sorted, 0.05, c_m))
        v_f, r_f = _fast.panel_reject_counts(panel, nulls, 0.05, c_m)
        v_r, r_r = _ref.panel_reject_counts(panel, nulls, 0.05, c_m)
        assert np.array_equal(v_f, v_r) and np.array_equal(r_f, r_r)
        print("\nbackend agreement: OK")


if __name__ == "__main__":
    main()
