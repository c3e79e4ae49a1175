"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one full local-training epoch under whichever backend
``FCLMIA_NUMBA`` selects; run it twice (``FCLMIA_NUMBA=0`` and unset) to
compare end to end.  With numba disabled the ``*_numba`` kernels are plain
Python loops, so only the numpy column is timed.
"""
import argparse
import time

import numpy as np

from fclmia import kernels
from fclmia._accel import NUMBA_ENABLED, backend_name


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.batch
    xp = rng.random((n, 18, 18, 16), dtype=np.float32)
    dcols = rng.random((n, 16, 16, 9 * 16), dtype=np.float32)
    images = rng.random((n, 16, 16, 3), dtype=np.float32)
    boxes = np.column_stack([rng.uniform(0, 4, n), rng.uniform(0, 4, n), rng.uniform(10, 12, n), rng.uniform(10, 12, n)])

    cases = {
        "im2col": (lambda: kernels.im2col_numpy(xp, 3, 1, 16, 16), lambda: kernels.im2col_numba(xp, 3, 1, 16, 16)),
        "col2im": (lambda: kernels.col2im_numpy(dcols, xp.shape, 3, 1), lambda: kernels.col2im_numba(dcols, xp.shape, 3, 1)),
        "crop_resize": (lambda: kernels.crop_resize_numpy(images, boxes, 16, 16), lambda: kernels.crop_resize_numba(images, boxes, 16, 16)),
    }
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, (np_fn, nb_fn) in cases.items():
        a = best_of(np_fn, args.repeat)
        if NUMBA_ENABLED:
            b = best_of(nb_fn, args.repeat)
            print(f"{name:<12} {a * 1e3:10.3f} {b * 1e3:10.3f} {a / b:9.2f}")
        else:
            print(f"{name:<12} {a * 1e3:10.3f} {'-':>10} {'-':>9}")

    from fclmia.contrastive import EncoderConfig, init_state, local_train
    from fclmia.datasets import AugmentationPolicy, DatasetSpec, load_pool

    train, _ = load_pool(DatasetSpec(n_train=128, n_holdout=8))
    state = init_state(EncoderConfig(), np.random.default_rng(0), queue_size=128)
    t = best_of(lambda: local_train(state, train.pixels, 1, 0.1, AugmentationPolicy(), np.random.default_rng(1)), max(1, args.repeat // 10))
    print(f"local epoch (128 samples, backend={backend_name()}): {t:.3f} s")


if __name__ == "__main__":
    main()
