"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs under both backends; outputs are checked
for equality before timings are printed.
"""

import argparse
import timeit

import numpy as np

from cordmorph import kernels
from cordmorph.phantom import PhantomSpec, generate


def cases(rng):
    mask, _, _ = generate(PhantomSpec(ap_semi_axis=4.0, rl_semi_axis=3.0, length=20.0, voxel_dims=(0.25, 0.25, 1.0)))
    vol = mask.data.astype(np.uint8)
    src = rng.random((3000, 3)) * 20
    dst = rng.random((3000, 3)) * 20
    sl = np.argwhere(vol[:, :, vol.shape[2] // 2] > 0)
    ii, jj = sl[:, 0].astype(np.int64), sl[:, 1].astype(np.int64)
    return {
        "nearest_distances 3000x3000": lambda b: b.nearest_distances(src, dst),
        f"hull_lattice_count {len(ii)} pts": lambda b: b.hull_lattice_count(ii, jj),
        f"dilate6 {vol.shape}": lambda b: b.dilate6(vol),
        f"erode6 {vol.shape}": lambda b: b.erode6(vol),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not built; timing the fallback only")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<36}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        outs = [np.asarray(fn(b)) for b in backends.values()]
        for o in outs[1:]:
            np.testing.assert_allclose(o, outs[0], rtol=0, atol=1e-12)
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends.values()]
        speed = f"{times[0] / times[1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{label:<36}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
