"""Compare the compiled kernel backend against the pure-numpy fallback.

Times the four kernel entry points at a few shapes, then whole training
steps, and prints one table.  Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats N] [--train-steps N]
"""

import argparse
import statistics
import time

import numpy as np

from scenevoice import kernels
from scenevoice.config import config_from_tree, default_dict
from scenevoice.model import MemoryAligner
from scenevoice.rng import make_rng
from scenevoice.synth import generate_dataset
from scenevoice.train import fit

SHAPES = ((32, 32, 32), (128, 64, 64), (256, 128, 128))


def _time(fn, repeats: int) -> float:
    """Median wall time in milliseconds."""
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def kernel_cases(b: int, n: int, d: int):
    rng = make_rng(7)
    q = rng.normal(size=(b, d))
    m = rng.normal(size=(n, d))
    s, qn, mn = kernels.cosine_forward(q, m)
    w = kernels.softmax_forward(s)
    g = rng.normal(size=(b, n))
    return {
        "cosine_forward": lambda: kernels.cosine_forward(q, m),
        "cosine_backward": lambda: kernels.cosine_backward(g, q, m, s, qn, mn),
        "softmax_forward": lambda: kernels.softmax_forward(s),
        "softmax_backward": lambda: kernels.softmax_backward(g, w),
    }


def train_case(steps: int):
    cfg = config_from_tree(default_dict())
    cfg.train.steps = steps
    world, pairs, _ = generate_dataset(
        cfg.world, cfg.data.n_samples, cfg.data.mode_mix, cfg.data.data_seed
    )

    def run():
        model = MemoryAligner.create(
            cfg.model.slot_count, cfg.world.dim, make_rng(cfg.model.init_seed),
            cfg.train.temperature,
        )
        fit(model, pairs, cfg.train)

    return run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30, help="timing samples per cell")
    parser.add_argument("--train-steps", type=int, default=200, help="steps per training measurement")
    args = parser.parse_args()

    backends = kernels.available_backends()
    if len(backends) < 2:
        print(f"only {backends} available; build the extension to compare")
    previous = kernels.get_backend()

    # report compiled speedup relative to the pure-numpy fallback; > 1 means
    # the compiled backend is faster
    ref = backends.index("numpy") if "numpy" in backends else 0
    header = f"{'op':<18} {'shape':<16}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'compiled':>10}"
    print(header)
    print("-" * len(header))

    def speedup(times) -> str:
        if len(times) != 2:
            return ""
        other = times[1 - ref]
        return f"{times[ref] / other:>9.2f}x"

    try:
        for b, n, d in SHAPES:
            names = kernel_cases(b, n, d).keys()
            for name in names:
                row = f"{name:<18} {f'{b}x{n}x{d}':<16}"
                times = []
                for backend in backends:
                    kernels.set_backend(backend)
                    fn = kernel_cases(b, n, d)[name]
                    fn()  # warm up
                    times.append(_time(fn, args.repeats))
                    row += f"{times[-1]:>14.4f}"
                print(row + speedup(times))

        run = train_case(args.train_steps)
        row = f"{'train_step':<18} {f'{args.train_steps} steps':<16}"
        times = []
        for backend in backends:
            kernels.set_backend(backend)
            times.append(_time(run, 3))
            row += f"{times[-1]:>14.1f}"
        print(row + speedup(times))
        print(f"\nsteps/s: " + ", ".join(
            f"{b} {args.train_steps / (t / 1e3):.0f}" for b, t in zip(backends, times)
        ))
    finally:
        kernels.set_backend(previous)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
