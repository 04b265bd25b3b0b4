"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--sizes 64 224]

Times each kernel per backend on the same inputs, checks the outputs agree,
and prints one row per (size, kernel) with the speedup of the compiled code.
"""

import argparse
import timeit

import numpy as np

from camsticker import _pykernels
from camsticker.ssim import TAPS

try:
    from camsticker import _ckernels
except ImportError:
    _ckernels = None


def _cases(size, stack, seed=0):
    """name -> function(module) returning the kernel output."""
    rng = np.random.default_rng(seed)
    imgs = rng.random((stack, size, size, 3))
    r = 40.0 * size / 224
    args = (size / 2 + 0.3, size / 2 - 0.7, r, 0.3, 1.0, (0.2, 0.7, 0.4), 0, size, 0, size)
    g = rng.normal(size=(size, size, 3))
    a, b = imgs[0], imgs[1]
    parts = [rng.normal(size=(size - len(TAPS) + 1, size - len(TAPS) + 1, 3)) for _ in range(3)]
    work = imgs.copy()

    def blend(mod):
        work[...] = imgs
        mod.blend(work, *args)
        return work

    return {
        f"blend x{stack}": blend,
        "dot_backward": lambda mod: mod.dot_backward(g.copy(), a, *args),
        "ssim_moments": lambda mod: np.stack(mod.ssim_moments(a, b, TAPS)),
        "ssim_backward": lambda mod: mod.ssim_backward(*parts, a, b, TAPS),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 224])
    ap.add_argument("--stack", type=int, default=32, help="images per blend call")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    backends = [("numpy", _pykernels)]
    if _ckernels is not None:
        backends.append(("cython", _ckernels))
    else:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"{'size':>5} {'kernel':>14} " + " ".join(f"{n + ' ms':>10}" for n, _ in backends) + f" {'speedup':>8}")
    total = {n: 0.0 for n, _ in backends}
    for size in args.sizes:
        for kname, fn in _cases(size, args.stack).items():
            times, outs = [], []
            for bname, mod in backends:
                t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
                times.append(t)
                total[bname] += t
                outs.append(np.array(fn(mod)))
            for other in outs[1:]:
                assert np.allclose(other, outs[0], rtol=1e-9, atol=1e-12), f"{kname} outputs differ"
            speed = f"{times[0] / times[-1]:.1f}x" if len(times) > 1 else ""
            print(f"{size:>5} {kname:>14} " + " ".join(f"{1e3 * t:>10.3f}" for t in times) + f" {speed:>8}")
    if len(backends) > 1:
        print(f"overall speedup {total['numpy'] / total['cython']:.1f}x")


if __name__ == "__main__":
    main()
