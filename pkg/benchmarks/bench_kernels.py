"""Compiled vs numpy convolution kernels.

Times the three conv entry points on layer shapes taken from the desk
DCNet, then one full training step, once per backend. Outputs of the two
backends are compared before timing.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from adiposeg import _kernels
from adiposeg.autodiff import OpAttrs, Tape, Tensor, backward, op_forward
from adiposeg.losses import RMSprop, one_hot
from adiposeg.nets import build_network, net_forward
from adiposeg.patching import PatchBatch

# (name, x shape, w shape, dilation, padding): desk DCNet layers at 32^3 and 16^3
CASES = [
    ("3x3x3 d1 @32^3", (8, 8, 32, 32, 32), (8, 8, 3, 3, 3), 1, 1),
    ("3x3x3 d2 @32^3", (8, 8, 32, 32, 32), (8, 8, 3, 3, 3), 2, 2),
    ("1x1x1    @32^3", (8, 16, 32, 32, 32), (8, 16, 1, 1, 1), 1, 0),
    ("3x3x3 d4 @16^3", (8, 8, 16, 16, 16), (8, 8, 3, 3, 3), 4, 4),
]


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_calls(x, w, gout, dilation, padding):
    return {
        "forward": lambda: _kernels.conv3d(x, w, 1, dilation, padding),
        "grad_input": lambda: _kernels.conv3d_grad_input(gout, w, x.shape[2:], 1, dilation, padding),
        "grad_weight": lambda: _kernels.conv3d_grad_weight(x, gout, w.shape, 1, dilation, padding),
    }


def train_step_fn():
    net = build_network("dcnet", {"bottlenecks": (8,) * 6}, seed=0)
    rng = np.random.default_rng(0)
    batch = PatchBatch(rng.random((8, 1, 32, 32, 32)).astype(np.float32), rng.random((8, 3)))
    target = Tensor(one_hot(rng.integers(0, 4, (8, 32, 32, 32)), 4, np.float32))
    opt = RMSprop(1e-4)

    def step():
        tape = Tape()
        _, probs = net_forward(net, batch, "train", tape)
        loss = op_forward("seg_loss", [probs, target], OpAttrs(coeffs=(1.0, 1.0, 1.0)), tape)
        grads = backward(tape, loss.id)
        opt.step(net.params, {k: grads[t.id] for k, t in net.params.items()})

    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        _kernels.set_backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    print(f"{'layer':16s} {'call':12s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, xs, ws, d, p in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        out_shape = _kernels.conv3d(x, w, 1, d, p).shape
        gout = rng.standard_normal(out_shape).astype(np.float32)
        results = {}
        for backend in ("cython", "numpy"):
            _kernels.set_backend(backend)
            calls = conv_calls(x, w, gout, d, p)
            results[backend] = {k: (best_of(fn, args.repeat), fn()) for k, fn in calls.items()}
        for call in ("forward", "grad_input", "grad_weight"):
            (tc, yc), (tn, yn) = results["cython"][call], results["numpy"][call]
            diff = float(np.abs(yc - yn).max() / max(np.abs(yn).max(), 1e-30))
            print(f"{name:16s} {call:12s} {tc * 1e3:10.2f} {tn * 1e3:10.2f} {tn / tc:7.1f}x {diff:11.2e}")

    step_times = {}
    for backend in ("cython", "numpy"):
        _kernels.set_backend(backend)
        step_times[backend] = best_of(train_step_fn(), max(1, args.repeat // 2))
    c, n = step_times["cython"], step_times["numpy"]
    print(f"{'desk DCNet':16s} {'train step':12s} {c * 1e3:10.1f} {n * 1e3:10.1f} {n / c:7.1f}x {'':>11s}")


if __name__ == "__main__":
    main()
