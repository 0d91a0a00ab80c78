"""Compare the compiled and NumPy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Reports the median wall time per case for each backend, the speed-up, and
whether the two outputs are bitwise equal.
"""
import argparse
import statistics
import time

import numpy as np

from densegrade import functional as F
from densegrade import kernels
from densegrade.augmentation import AugmentationPolicy, augment_batch
from densegrade.tensor import Tensor, backward


def _median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(quick):
    rng = np.random.default_rng(0)
    n, c, s = (4, 32, 16) if quick else (16, 64, 32)
    xp = rng.standard_normal((n, c, s + 2, s + 2)).astype(np.float32)
    cols = kernels.get_backend("python").im2col(xp, 3, 3, 1, 1)
    imgs = rng.random((n * 4, 3, 64, 64)).astype(np.float32)
    x = rng.standard_normal((n, c, s, s)).astype(np.float32)
    w = (rng.standard_normal((c // 2, c, 3, 3)) * 0.1).astype(np.float32)

    def conv_fwd_bwd():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        out = F.conv2d(xt, wt, padding=1)
        backward(out.sum())
        return np.concatenate([out.data.ravel(), xt.grad.ravel(), wt.grad.ravel()])

    return {
        "im2col 3x3": lambda: kernels.im2col(xp, 3, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, xp.shape, 3, 3, 1, 1),
        "augment batch": lambda: augment_batch(imgs, np.zeros(len(imgs)), AugmentationPolicy(), 0, 1,
                                               np.arange(len(imgs)))[0],
        "conv2d fwd+bwd": conv_fwd_bwd,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small shapes for a fast smoke run")
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'case':<18}" + "".join(f"{b:>12}" for b in backends) + f"{'speed-up':>10}{'equal':>7}")
    for name, fn in cases(args.quick).items():
        times, outs = {}, {}
        for b in backends:
            with kernels.use_backend(b):
                times[b] = _median_time(fn, args.repeat)
                outs[b] = fn()
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        equal = all(np.array_equal(outs[b], outs["python"]) for b in backends)
        print(f"{name:<18}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
              + f"{speed:>9.1f}x{str(equal):>7}")


if __name__ == "__main__":
    main()
