#!/usr/bin/env python3
"""Compare the compiled assembly kernels against the numpy fallback.

Builds a Taylor-Hood space on a cavity mesh, gathers realistic inputs,
and times every element kernel from both implementations on identical
data, reporting best-of-``repeats`` wall times, the speedup ratio, and
the maximum pointwise deviation between the two backends.

Run from a checkout or an installed tree::

    python3 benchmarks/bench_kernels.py --resolution 32 --repeats 5
"""

import argparse
import time

import numpy as np

from smagrb import meshing, spaces
from smagrb._kernels import fallback

try:
    from smagrb._kernels import _speedups
except ImportError:
    _speedups = None


def _time(fn, args, repeats):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def build_cases(resolution, seed):
    mesh = meshing.generate_cavity_mesh(resolution)
    space = spaces.build_taylor_hood(mesh)
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(space.n_velocity)
    uloc = space.gather_velocity(coeffs)
    grads = fallback.field_gradients(space.vgrad, uloc)
    gmag = fallback.frobenius_norm(grads)
    wq = fallback.field_values(space.vval, uloc)
    weight = rng.random(space.detw.shape) + 0.5
    scale = rng.random(space.n_elements) + 0.5
    return space, [
        ("field_gradients", (space.vgrad, uloc)),
        ("field_values", (space.vval, uloc)),
        ("frobenius_norm", (grads,)),
        ("weighted_stiffness_local", (space.vgrad, space.detw, weight)),
        ("weighted_mass_local", (space.vval, space.detw, weight)),
        ("convection_local", (space.vval, space.vgrad, space.detw, wq)),
        ("convection_dual_local", (space.vval, space.detw, grads)),
        (
            "rank_one_viscosity_local",
            (space.vgrad, space.detw, grads, gmag, scale, 1e-12),
        ),
        ("divergence_local", (space.pval, space.vgrad, space.detw)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--resolution", type=int, default=32,
                        help="cavity mesh cells per side (default 32)")
    parser.add_argument("--repeats", type=int, default=5,
                        help="take the best of this many runs (default 5)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    space, cases = build_cases(args.resolution, args.seed)
    print(
        f"cavity n={args.resolution}: {space.n_elements} triangles, "
        f"{space.n_velocity} velocity dofs"
    )
    if _speedups is None:
        print("compiled kernels unavailable; timing the fallback only\n")
    header = f"{'kernel':28s} {'fallback':>10s} {'compiled':>10s} {'ratio':>7s} {'max diff':>10s}"
    print(header)
    print("-" * len(header))
    for name, case_args in cases:
        t_fb, ref = _time(getattr(fallback, name), case_args, args.repeats)
        if _speedups is None:
            print(f"{name:28s} {t_fb * 1e3:9.3f}ms {'-':>10s} {'-':>7s} {'-':>10s}")
            continue
        t_c, out = _time(getattr(_speedups, name), case_args, args.repeats)
        diff = float(np.max(np.abs(np.asarray(out) - np.asarray(ref))))
        ratio = t_fb / t_c if t_c > 0 else float("inf")
        print(
            f"{name:28s} {t_fb * 1e3:9.3f}ms {t_c * 1e3:9.3f}ms "
            f"{ratio:6.2f}x {diff:10.2e}"
        )


if __name__ == "__main__":
    main()
