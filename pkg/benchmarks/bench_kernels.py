"""Compare the compiled and pure-numpy im2col/col2im kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Prints the median time per call for both backends on conv shapes used by
the default model, and checks that the two backends agree bit for bit.
"""
import argparse
import statistics
import time

import numpy as np

from lgaf import _fallback

try:
    from lgaf import _kernels
except ImportError:
    _kernels = None

# (batch, channels, height, width, kernel, stride)
SHAPES = [
    (64, 3, 32, 32, 3, 1),
    (64, 16, 32, 32, 3, 2),
    (64, 32, 16, 16, 3, 1),
    (64, 64, 4, 4, 5, 1),
]


def _time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(repeat: int = 5):
    rng = np.random.default_rng(0)
    rows = []
    for n, c, h, w, k, s in SHAPES:
        pad = (k - 1) // 2
        xp = np.ascontiguousarray(np.pad(rng.normal(size=(n, c, h, w)).astype(np.float32),
                                         ((0, 0), (0, 0), (pad, pad), (pad, pad))))
        hp, wp = xp.shape[2:]
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        cols = _fallback.im2col(xp, k, s, ho, wo)
        grad = np.ascontiguousarray(rng.normal(size=cols.shape).astype(np.float32))
        backends = {"python": _fallback}
        if _kernels is not None:
            backends["compiled"] = _kernels
        res = {}
        for name, mod in backends.items():
            res[name] = (
                _time(lambda: mod.im2col(xp, k, s, ho, wo), repeat),
                _time(lambda: mod.col2im(grad, n, c, hp, wp, k, s, ho, wo), repeat),
                np.asarray(mod.im2col(xp, k, s, ho, wo)),
                np.asarray(mod.col2im(grad, n, c, hp, wp, k, s, ho, wo)),
            )
        same = None
        if "compiled" in res:
            same = all(np.array_equal(res["python"][i], res["compiled"][i]) for i in (2, 3))
        rows.append(((n, c, h, w, k, s), {b: r[:2] for b, r in res.items()}, same))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'shape (n,c,h,w,k,s)':<26} {'backend':<9} {'im2col ms':>10} {'col2im ms':>10}  identical")
    for shape, timings, same in bench(args.repeat):
        for backend, (t_im, t_col) in timings.items():
            print(f"{str(shape):<26} {backend:<9} {t_im * 1e3:10.2f} {t_col * 1e3:10.2f}  {'' if same is None else same}")


if __name__ == "__main__":
    main()
