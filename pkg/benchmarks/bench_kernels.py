"""Compare the numba and numpy kernel sets.

Times each kernel at a few shapes, then one full training step (forward,
backward, Adam) at the acceptance model size. Outputs from the two
backends are checked against each other before timing.

    python benchmarks/bench_kernels.py [--repeats 50] [--skip-step]
"""

import argparse
import time

import numpy as np

from wsdan import kernels
from wsdan.autodiff import Tape
from wsdan.config import TrainConfig
from wsdan.data import generate
from wsdan.head import smoothed_ce_from_logits
from wsdan.model import make_batch
from wsdan.train import Adam, build_model

# (rows, width): TSE logits, DAL self-attention over Q, LN over a batch of rows
SHAPES = [(16 * 12, 12), (16 * 4 * 12, 12), (16 * 17, 64), (16 * 17, 312)]


def best_of(fn, repeats):
    fn()  # warm-up, also triggers JIT compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rows, width, rng):
    x = rng.standard_normal((rows, width))
    mask = rng.random((rows, width)) > 0.2
    mask[:, 0] = True
    shift = np.zeros(rows)
    g = rng.standard_normal((rows, width))
    gain, bias = rng.standard_normal(width), rng.standard_normal(width)
    y = kernels.softmax_forward_numpy(x, mask, shift)
    _, xhat, rstd = kernels.layer_norm_forward_numpy(x, gain, bias, 1e-6)
    return {
        "softmax fwd": lambda k: k[0](x, mask, shift),
        "softmax bwd": lambda k: k[1](y, g),
        "layernorm fwd": lambda k: k[2](x, gain, bias, 1e-6),
        "layernorm bwd": lambda k: k[3](g, xhat, rstd, gain),
    }


def check_agreement(rng):
    for rows, width in SHAPES:
        for name, run in kernel_cases(rows, width, rng).items():
            a = run(kernels.BACKENDS["numpy"])
            b = run(kernels.BACKENDS["numba"])
            for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                err = np.max(np.abs(u - v))
                if err > 1e-12:
                    raise SystemExit(f"{name} {rows}x{width}: backends differ by {err:.3e}")


def bench_kernels(repeats, rng):
    print(f"{'kernel':<15}{'shape':>12}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for rows, width in SHAPES:
        for name, run in kernel_cases(rows, width, rng).items():
            t_np = best_of(lambda: run(kernels.BACKENDS["numpy"]), repeats)
            t_nb = best_of(lambda: run(kernels.BACKENDS["numba"]), repeats)
            print(f"{name:<15}{f'{rows}x{width}':>12}{1e6 * t_np:>12.1f}{1e6 * t_nb:>12.1f}{t_np / t_nb:>9.2f}")


def bench_step(repeats):
    cfg = TrainConfig(d=64, h=4, n=12, L=2, synth_train=64, synth_val=16, synth_test=16)
    ds = generate(cfg.synth_spec())
    batch = make_batch(ds.train[:16])
    print(f"\ntraining step, d={cfg.d} h={cfg.h} n={cfg.n} L={cfg.L} batch 16")
    for name in ("numpy", "numba"):
        kernels.set_backend(name)
        model = build_model(cfg, ds)
        opt = Adam(model.params.named(), lr=cfg.lr)

        def step():
            model.params.zero_grad()
            with Tape() as tape:
                loss = smoothed_ce_from_logits(model.forward(batch, rng=np.random.default_rng(0), train=True),
                                               batch.targets, cfg.label_smoothing)
            tape.backward(loss)
            opt.step()

        print(f"  {name:<6} {1e3 * best_of(step, repeats):8.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    check_agreement(rng)
    bench_kernels(args.repeats, rng)
    if not args.skip_step:
        bench_step(max(3, args.repeats // 5))


if __name__ == "__main__":
    main()
