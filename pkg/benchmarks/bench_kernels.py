"""Compiled vs numpy kernels, plus one end-to-end editor gradient step.

    python3 benchmarks/bench_kernels.py [--repeat N] [--quick]

Prints one line per (kernel, size, backend) with the best wall time over
``--repeat`` runs and checks both backends agree.
"""
import argparse
import time

import numpy as np

from massedit import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def spd(rng, n):
    a = rng.normal(size=(n, 2 * n))
    return a @ a.T / (2 * n) + 1e-3 * np.eye(n)


def bench_kernels(sizes, repeat):
    rng = np.random.default_rng(0)
    backends = ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    rows = []
    for n in sizes:
        a = spd(rng, n)
        b = rng.normal(size=(64, n))
        keys, pkeys = rng.normal(size=(4 * n, n)), rng.normal(size=(4 * n, n))
        pgrads = rng.normal(size=(4 * n, n))
        shift = rng.normal(size=(n, n))
        L = kernels.cholesky(a)
        cases = {
            "cholesky": lambda be: kernels.cholesky(a, backend=be),
            "cho_solve_right": lambda be: kernels.cho_solve_right(L, b, backend=be),
            "value_differences": lambda be: kernels.value_differences(pkeys, keys, pgrads, 0.1, backend=be)[0],
            "residual_norms": lambda be: kernels.residual_norms(shift, keys, pgrads, backend=be)[0],
        }
        for name, fn in cases.items():
            outs = {be: fn(be) for be in backends}
            if len(outs) == 2:
                err = float(np.max(np.abs(outs["python"] - outs["compiled"])))
                assert err <= 1e-9 * max(1.0, float(np.max(np.abs(outs["python"])))), (name, n, err)
            for be in backends:
                rows.append((name, n, be, best_of(lambda: fn(be), repeat)))
    return rows


def bench_step(repeat):
    from massedit import lm, pipeline, tasks

    task = tasks.generate_synthetic_task(0, 256, 128, 5, 2, num_unrelated=64, flip_labels=False)
    model = lm.init_model(task.vocab_size, width=32, hidden=128, n_blocks=3, max_len=task.max_len(), seed=0)
    cfg = pipeline.EditorConfig(m_edits=64, sub_batch_size=16, steps=1, eta_init=1e-2)
    model, h = pipeline.prepare_editor(model, cfg)
    return best_of(lambda: pipeline.train_editor(h, model, task, cfg, deterministic=True), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small sizes only")
    args = ap.parse_args()
    sizes = (16, 64) if args.quick else (16, 64, 256)
    print(f"kernel backend: {kernels.BACKEND}")
    print(f"{'kernel':<20}{'n':>6}  {'backend':<10}{'best s':>12}")
    for name, n, be, t in bench_kernels(sizes, args.repeat):
        print(f"{name:<20}{n:>6}  {be:<10}{t:>12.6f}")
    print(f"editor training step (m=64, 3 editable layers): {bench_step(max(1, args.repeat // 2)):.4f} s")


if __name__ == "__main__":
    main()
