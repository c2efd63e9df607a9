"""Compare the compiled conv/pool kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 8]

Shapes follow the LeNet-1 layers on 28x28 inputs. Each line reports the best
time per call for both backends and the speed-up; a final block times one
full locked training step of the CNN through ``edgepro.nn`` with each backend.
"""

import argparse
import timeit

import numpy as np

from edgepro import _pykernels, nn
from edgepro.lock import generate_key, lock_plan

try:
    from edgepro import _ckernels
except ImportError:
    _ckernels = None


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(batch, rng):
    x1 = rng.uniform(size=(batch, 1, 28, 28))
    w1 = rng.normal(size=(4, 1, 5, 5))
    x2 = rng.uniform(size=(batch, 4, 12, 12))
    w2 = rng.normal(size=(12, 4, 5, 5))
    p1 = rng.normal(size=(batch, 4, 24, 24))
    for name, x, w in (("conv1 1->4 5x5 @28", x1, w1), ("conv2 4->12 5x5 @12", x2, w2)):
        b = np.zeros(w.shape[0])
        gy = rng.normal(size=(batch, w.shape[0], x.shape[2] - 4, x.shape[3] - 4))
        yield f"{name} forward", lambda k, x=x, w=w, b=b: k.conv2d_forward(x, w, b)
        yield f"{name} backward", lambda k, x=x, w=w, gy=gy: k.conv2d_backward(x, w, gy)
    _, arg = _pykernels.maxpool2d_forward(p1, 2, 2)
    g = rng.normal(size=(batch, 4, 12, 12))
    yield "maxpool 2x2 @24 forward", lambda k: k.maxpool2d_forward(p1, 2, 2)
    yield "maxpool 2x2 @24 backward", lambda k: k.maxpool2d_backward(g, arg, p1.shape)


def train_step(backend, batch, rng):
    """One locked SGD step of LeNet-1 with the given kernel module patched in."""
    net = nn.lenet1(seed=0)
    lock = lock_plan(net, generate_key(net, 5, seed=0))
    x = rng.uniform(size=(batch, 1, 28, 28))
    y = rng.integers(0, 10, size=batch)
    saved = {n: getattr(nn.kernels, n) for n in
             ("conv2d_forward", "conv2d_backward", "maxpool2d_forward", "maxpool2d_backward")}

    def step():
        for n in saved:
            setattr(nn.kernels, n, getattr(backend, n))
        try:
            _, grads = nn.loss_and_grad(net, x, y, lock=lock)
            nn.sgd_step(net, grads, 0.0)
        finally:
            for n, f in saved.items():
                setattr(nn.kernels, n, f)

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    rng = np.random.default_rng(0)
    print(f"{'case':<34}{'python':>12}{'cython':>12}{'speed-up':>10}")
    for name, fn in kernel_cases(args.batch, rng):
        tp = best(lambda: fn(_pykernels), args.repeat, 5)
        tc = best(lambda: fn(_ckernels), args.repeat, 5)
        print(f"{name:<34}{tp * 1e6:>10.1f}us{tc * 1e6:>10.1f}us{tp / tc:>9.2f}x")
    tp = best(train_step(_pykernels, args.batch, rng), args.repeat, 3)
    tc = best(train_step(_ckernels, args.batch, rng), args.repeat, 3)
    print(f"{'LeNet-1 locked train step':<34}{tp * 1e6:>10.1f}us{tc * 1e6:>10.1f}us"
          f"{tp / tc:>9.2f}x")


if __name__ == "__main__":
    main()
