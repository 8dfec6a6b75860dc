"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Times each hot kernel on a training-sized batch, then one full
forward/backward/Adam step of the default U-Net with each backend swapped in.
"""

import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from bandprobe import _kernels_py, kernels, tensor as T, trainer, unet

KERNELS = ("im2col3x3", "col2im3x3", "maxpool2x2", "maxpool2x2_backward")


def _compiled():
    try:
        from bandprobe import _ckernels
    except ImportError:
        return None
    return _ckernels


@contextmanager
def backend(module):
    saved = {k: getattr(kernels, k) for k in KERNELS}
    try:
        for k in KERNELS:
            setattr(kernels, k, getattr(module, k))
        yield
    finally:
        for k, fn in saved.items():
            setattr(kernels, k, fn)


def kernel_cases(n=8, c=16, h=64, w=64):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    cols = _kernels_py.im2col3x3(x)
    out, idx = _kernels_py.maxpool2x2(x)
    return {
        "im2col3x3": lambda m: m.im2col3x3(x),
        "col2im3x3": lambda m: m.col2im3x3(cols, n, c, h, w),
        "maxpool2x2": lambda m: m.maxpool2x2(x),
        "maxpool2x2_backward": lambda m: m.maxpool2x2_backward(out, idx),
    }


def train_step_case(batch=4, size=64):
    rng = np.random.default_rng(0)
    model = unet.build(unet.UNetConfig(), seed=0)
    x = T.Tensor(rng.random((batch, 12, size, size)))
    y = rng.integers(0, 2, (batch, size, size))
    opt = trainer.Adam(model.parameters(), lr=1e-3)

    def step():
        model.zero_grad()
        T.cross_entropy(model(x), y).backward()
        opt.step()

    return step


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat=20, step_repeat=3):
    """Return rows of (name, numpy seconds, compiled seconds or None)."""
    compiled = _compiled()
    rows = []
    for name, case in kernel_cases().items():
        py = best_of(lambda: case(_kernels_py), repeat)
        c = best_of(lambda: case(compiled), repeat) if compiled else None
        rows.append((name, py, c))
    step = train_step_case()
    with backend(_kernels_py):
        py = best_of(step, step_repeat)
    c = None
    if compiled:
        with backend(compiled):
            c = best_of(step, step_repeat)
    rows.append(("unet train step", py, c))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'kernel':22s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, py, c in run(args.repeat):
        if c is None:
            print(f"{name:22s} {py * 1e3:10.2f} {'n/a':>10s}")
        else:
            print(f"{name:22s} {py * 1e3:10.2f} {c * 1e3:10.2f} {py / c:7.2f}x")


if __name__ == "__main__":
    main()
