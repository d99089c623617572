"""Time im2col/col2im for each available backend on the shapes a 64x64 run uses.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from s2ldm.diffnet import kernels

# (N, H, W, C, stride): encoder/decoder/denoiser convolutions at desk scale
SHAPES = [
    (2, 64, 64, 16, 1),
    (2, 64, 64, 16, 2),
    (2, 32, 32, 32, 1),
    (2, 16, 16, 64, 1),
    (2, 16, 16, 16, 1),
    (2, 4, 4, 64, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    print(f"default backend: {kernels.BACKEND}")
    header = "shape (N,H,W,C,s)      " + "".join(f"{b + ' im2col':>16}{b + ' col2im':>16}" for b in backends)
    print(header)
    for n, h, w, c, s in SHAPES:
        x = rng.normal(size=(n, h, w, c)).astype(np.float32)
        cols = kernels.im2col(x, 3, s, 1, backend="python")
        row = f"{str((n, h, w, c, s)):<23}"
        for b in backends:
            t_fwd = best_of(lambda: kernels.im2col(x, 3, s, 1, backend=b), args.repeat)
            t_bwd = best_of(lambda: kernels.col2im(cols, x.shape, 3, s, 1, backend=b), args.repeat)
            row += f"{t_fwd * 1e3:>13.3f} ms{t_bwd * 1e3:>13.3f} ms"
        print(row)


if __name__ == "__main__":
    main()
