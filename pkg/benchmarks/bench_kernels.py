"""Compare the compiled im2col/col2im kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from medusa import kernels

SHAPES = [
    # (N, C, H, W, k, stride)
    (8, 8, 16, 16, 3, 1),
    (8, 16, 8, 8, 3, 1),
    (8, 3, 64, 64, 3, 2),
    (8, 64, 2, 2, 3, 1),
]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, c, h, w, k, s in SHAPES:
        pad = (k - 1) // 2
        x = rng.standard_normal((n, c, h, w))
        cols = kernels.im2col_numpy(x, k, s, pad)
        cases = {
            "im2col": (lambda: kernels.im2col_numpy(x, k, s, pad), lambda: kernels.im2col(x, k, s, pad)),
            "col2im": (
                lambda: kernels.col2im_numpy(cols, c, h, w, k, s, pad),
                lambda: kernels.col2im(cols, c, h, w, k, s, pad),
            ),
        }
        for op, (slow, fast) in cases.items():
            t_np = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
            line = f"{str((n, c, h, w, k, s)):<28}{op:<8}{t_np:>10.3f}"
            if kernels.BACKEND == "cython":
                t_cy = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
                line += f"{t_cy:>11.3f}{t_np / t_cy:>8.2f}x"
            print(line)


if __name__ == "__main__":
    main()
