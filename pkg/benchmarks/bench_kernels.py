"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times each kernel on panel-sized inputs and one weighted matrix-completion
fit with each backend swapped in.
"""

import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from retropanel import _backend, _kernels_py
from retropanel.mc_solver import fit_weighted_mc
from retropanel.synthetic_dgp import DgpConfig, generate_panel

try:
    from retropanel import _kernels as _compiled
except ImportError:
    _compiled = None


@contextmanager
def use_backend(mod):
    saved = (_backend.fe_sweeps, _backend.twoway_demean, _backend.scm_eg)
    _backend.fe_sweeps, _backend.twoway_demean, _backend.scm_eg = mod.fe_sweeps, mod.twoway_demean, mod.scm_eg
    try:
        yield
    finally:
        _backend.fe_sweeps, _backend.twoway_demean, _backend.scm_eg = saved


def cases(rng):
    R = np.ascontiguousarray(rng.normal(size=(53, 60)))
    w = np.ascontiguousarray(rng.uniform(0.1, 3.0, size=(53, 60)))
    C = rng.normal(size=(27, 18))
    y = 0.6 * C[0] + 0.4 * C[5] + 0.05 * rng.normal(size=18)

    def fe(mod):
        mod.fe_sweeps(R, w, np.zeros(53), np.zeros(60), 200, 1e-12)

    def demean(mod):
        mod.twoway_demean(R, 1e-10)

    def scm(mod):
        mod.scm_eg(y, C, 0.1, 5.0, 1e-6, 10000, 40)

    return {"fe_sweeps 53x60": fe, "twoway_demean 53x60": demean, "scm_eg 27 controls": scm}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _compiled is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . first")

    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        number = 20
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=number, repeat=args.repeat)) / number
        cy = min(timeit.repeat(lambda: fn(_compiled), number=number, repeat=args.repeat)) / number
        print(f"{name:<28}{py * 1e3:>12.3f}{cy * 1e3:>12.3f}{py / cy:>10.1f}")

    ds, _ = generate_panel(DgpConfig(seed=0))
    obs = ds.treatment == 1
    weights = np.where(obs, rng.uniform(0.05, 20.0, size=obs.shape), 0.0)
    timings = {}
    for label, mod in (("numpy", _kernels_py), ("cython", _compiled)):
        with use_backend(mod):
            timings[label] = min(
                timeit.repeat(lambda: fit_weighted_mc(ds.outcomes, obs, weights, lambda_L=1e-3), number=1, repeat=args.repeat)
            )
    print(
        f"{'weighted MC fit 53x60':<28}{timings['numpy'] * 1e3:>12.1f}{timings['cython'] * 1e3:>12.1f}"
        f"{timings['numpy'] / timings['cython']:>10.1f}"
    )


if __name__ == "__main__":
    main()
