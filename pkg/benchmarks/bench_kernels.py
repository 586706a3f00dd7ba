"""Time the compiled segment kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Kernel shapes match one finetuning forward/backward on the default synthetic
cohort (about 2000 visits, 6 codes per visit, h=4, d=32).  ``--end-to-end``
also times a few full-batch pretraining iterations under each backend.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from hypercare import kernels


def make_inputs(n_segments=2000, mean_size=6, h=4, d=32, seed=0):
    rng = np.random.default_rng(seed)
    sizes = rng.poisson(mean_size - 1, size=n_segments) + 1
    ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    nnz = int(ptr[-1])
    scores = rng.normal(size=(nnz, h))
    values = rng.normal(size=(nnz, d))
    grad_out = rng.normal(size=(n_segments, d))
    index = rng.integers(0, n_segments // 10, size=nnz).astype(np.int64)
    return ptr, scores, values, grad_out, index


def kernel_cases(table, ptr, scores, values, grad_out, index):
    weights = table["segment_softmax"](scores, ptr)
    return {
        "segment_softmax": lambda: table["segment_softmax"](scores, ptr),
        "segment_softmax_backward": lambda: table["segment_softmax_backward"](weights, scores, ptr),
        "segment_weighted_sum": lambda: table["segment_weighted_sum"](weights, values, ptr),
        "segment_weighted_sum_backward": lambda: table["segment_weighted_sum_backward"](weights, values, grad_out, ptr),
        "scatter_add_rows": lambda: table["scatter_add_rows"](values, index, len(ptr) // 10 + 1),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench_kernels(repeat: int) -> None:
    inputs = make_inputs()
    backends = kernels.available_backends()
    cases = {b: kernel_cases(kernels.get_backend(b), *inputs) for b in backends}
    print(f"{'kernel':34s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name in cases["python"]:
        times = {b: best_of(cases[b][name], repeat, 20) for b in backends}
        row = f"{name:34s}" + "".join(f"{times[b] * 1e3:11.3f} ms" for b in backends)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:11.1f}x"
        print(row)


def bench_end_to_end(iters: int = 5) -> None:
    from hypercare.cohort import SyntheticConfig, generate_synthetic
    from hypercare.model import ModelConfig
    from hypercare.training import TrainConfig, pretrain

    cohort = generate_synthetic(SyntheticConfig())
    cfg, tcfg = ModelConfig(), TrainConfig(iter_pretrain=iters)
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        t = min(timeit.repeat(lambda: pretrain(cohort, cfg, tcfg), repeat=2, number=1))
        print(f"pretrain x{iters} [{backend}]: {t:.2f} s ({t / iters * 1e3:.0f} ms/iter)")
    kernels.use_backend(kernels.available_backends()[-1])


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args(argv)
    print(f"backends: {', '.join(kernels.available_backends())} (default {kernels.BACKEND})")
    bench_kernels(args.repeat)
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
