"""Compiled vs numpy sliding-window kernels, alone and inside conv3d / max_pool3d / a model step.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from csg3dct import kernels, ops
from csg3dct.config import ModelConfig
from csg3dct.model import CSG3DCT
from csg3dct.tensor import Tensor


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    # (label, padded input, kernel/stride args) at the shapes the toy model actually uses
    stem = rng.normal(size=(4, 1, 8, 68, 68)).astype(np.float32)
    c3 = rng.normal(size=(4, 16, 10, 18, 18)).astype(np.float32)
    pool = rng.normal(size=(4, 16, 8, 34, 34)).astype(np.float32)
    return [
        ("im2col stem 1x5x5/2", lambda k: k.im2col3d(stem, 1, 5, 5, 1, 2, 2)),
        ("im2col c3 3x3x3/2", lambda k: k.im2col3d(c3, 3, 3, 3, 1, 2, 2)),
        ("col2im c3 3x3x3/2", lambda k, c=None: k.col2im3d(
            np.ascontiguousarray(k.im2col3d(c3, 3, 3, 3, 1, 2, 2)), c3.shape, 3, 3, 3, 1, 2, 2)),
        ("maxpool fwd 1x3x3/2", lambda k: k.maxpool3d_forward(pool, 1, 3, 3, 1, 2, 2)),
        ("maxpool fwd+bwd", lambda k: k.maxpool3d_backward(
            *(lambda o: (np.ones_like(o[0]), o[1]))(k.maxpool3d_forward(pool, 1, 3, 3, 1, 2, 2)),
            pool.shape, 1, 3, 3, 1, 2, 2)),
    ]


def model_step(model, x, y):
    model.zero_grad()
    loss, _ = model.loss(x, y)
    loss.backward()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    from csg3dct import _kernels, _kernels_py

    rng = np.random.default_rng(0)
    print(f"{'case':<26}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for label, fn in cases(rng):
        tc = best_of(lambda: fn(_kernels), args.repeat)
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        print(f"{label:<26}{tc * 1e3:12.2f}{tp * 1e3:12.2f}{tp / tc:10.2f}")

    model = CSG3DCT(ModelConfig())
    x = Tensor(rng.uniform(0, 1, size=(4, 1, 8, 64, 64)).astype(np.float32))
    y = np.array([0, 1, 0, 1])
    w = Tensor(rng.normal(size=(16, 16, 3, 3, 3)).astype(np.float32))
    xc = Tensor(rng.normal(size=(4, 16, 8, 16, 16)).astype(np.float32))
    end_to_end = [
        ("conv3d fwd 3x3x3", lambda: ops.conv3d(xc, w, padding=1)),
        ("model fwd+bwd (batch 4)", lambda: model_step(model, x, y)),
    ]
    for label, fn in end_to_end:
        times = {}
        for backend in ("cython", "python"):
            previous = kernels.use_backend(backend)
            times[backend] = best_of(fn, args.repeat)
            kernels.use_backend(previous)
        tc, tp = times["cython"], times["python"]
        print(f"{label:<26}{tc * 1e3:12.2f}{tp * 1e3:12.2f}{tp / tc:10.2f}")


if __name__ == "__main__":
    main()
